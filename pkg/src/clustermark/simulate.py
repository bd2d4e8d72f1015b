"""Desk-scale stand-ins for a real tokenizer pipeline.

Provides a synthetic blob-structured codebook, a mock autoregressive model
with controllable entropy, a similarity-biased token-edit channel standing
in for the decode/re-encode mismatch of real pipelines, and a uniform
substitution attack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .codebook import TokenEmbeddingTable
from .generate import TokenSequence

__all__ = [
    "RetokenizationChannel",
    "MockModel",
    "synthesize_codebook",
    "planted_assignment",
    "sample_mock_model",
    "apply_retokenization",
    "apply_substitution_attack",
    "load_sim_config",
    "SIM_CONFIG_VERSION",
]

_ROW_STREAM = 0x524F57  # distinguishes row draws from other seeded streams
_MIN_TEMPERATURE = 1e-4


def planted_assignment(vocab_size: int, n_blobs: int) -> np.ndarray:
    """Ground-truth blob label per token, as laid out by synthesize_codebook."""
    vocab_size = int(vocab_size)
    n_blobs = int(n_blobs)
    if not 1 <= n_blobs <= vocab_size:
        raise ValueError(f"need 1 <= n_blobs <= {vocab_size}, got {n_blobs}")
    counts = np.full(n_blobs, vocab_size // n_blobs, dtype=np.int64)
    counts[: vocab_size % n_blobs] += 1
    return np.repeat(np.arange(n_blobs), counts)


def synthesize_codebook(
    seed: int,
    vocab_size: int,
    dim: int,
    n_blobs: int,
    separation: float,
    blob_std: float,
) -> TokenEmbeddingTable:
    """Gaussian-blob embedding table with pairwise center distance >= separation.

    Token i belongs to blob `planted_assignment(vocab_size, n_blobs)[i]`.
    Deterministic for a fixed seed.
    """
    vocab_size = int(vocab_size)
    dim = int(dim)
    n_blobs = int(n_blobs)
    separation = float(separation)
    blob_std = float(blob_std)
    if vocab_size < 1 or dim < 1:
        raise ValueError("vocab_size and dim must be positive")
    if not 1 <= n_blobs <= vocab_size:
        raise ValueError(f"need 1 <= n_blobs <= {vocab_size}, got {n_blobs}")
    if not (np.isfinite(separation) and separation >= 0.0):
        raise ValueError(f"separation must be a finite non-negative real, got {separation}")
    if not (np.isfinite(blob_std) and blob_std >= 0.0):
        raise ValueError(f"blob_std must be a finite non-negative real, got {blob_std}")
    rng = np.random.default_rng(seed)
    # Spread centers well beyond the minimum separation so rejection rarely
    # triggers; only the pairwise minimum is enforced.
    scale = separation * max(1.0, n_blobs ** (1.0 / dim)) if separation > 0 else 1.0
    centers = np.zeros((n_blobs, dim))
    for b in range(n_blobs):
        for _ in range(1000):
            cand = rng.normal(0.0, scale, dim)
            if b == 0 or (((centers[:b] - cand) ** 2).sum(axis=1) >= separation**2).all():
                centers[b] = cand
                break
        else:
            raise ValueError(
                f"unable to place {n_blobs} blob centers at pairwise separation {separation}"
            )
    labels = planted_assignment(vocab_size, n_blobs)
    vectors = centers[labels] + rng.normal(0.0, blob_std, (vocab_size, dim))
    return TokenEmbeddingTable(vectors=vectors.astype(np.float32))


class MockModel:
    """Synthetic Markov model with per-context Dirichlet rows.

    Rows are drawn lazily (seeded by the context, so identical across
    processes and call orders) from a symmetric Dirichlet and then tempered:
    smaller `dirichlet_alpha` or `temperature` means lower entropy.
    Read-only after construction apart from the internal row cache, which is
    safe to share across threads holding the GIL.
    """

    def __init__(
        self,
        seed: int,
        vocab_size: int,
        order: int = 1,
        dirichlet_alpha: float = 1.0,
        temperature: float = 1.0,
    ) -> None:
        if int(seed) < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        if int(vocab_size) < 2:
            raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
        if int(order) < 0:
            raise ValueError(f"order must be >= 0, got {order}")
        if not (float(dirichlet_alpha) > 0.0):
            raise ValueError(f"dirichlet_alpha must be positive, got {dirichlet_alpha}")
        if not (float(temperature) > 0.0):
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.seed = int(seed)
        self._vocab_size = int(vocab_size)
        self.order = int(order)
        self.dirichlet_alpha = float(dirichlet_alpha)
        self.temperature = max(float(temperature), _MIN_TEMPERATURE)
        self._rows: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def _context_key(self, context) -> tuple[int, ...]:
        ids = [int(x) for x in context]
        if len(ids) >= self.order:
            window = ids[len(ids) - self.order :]
        else:
            window = [self._vocab_size] * (self.order - len(ids)) + ids
        return tuple(window)

    def next_distribution(self, context) -> np.ndarray:
        key = self._context_key(context)
        row = self._rows.get(key)
        if row is None:
            row = self._build_row(key)
            self._rows[key] = row
        return row

    def _build_row(self, key: tuple[int, ...]) -> np.ndarray:
        ss = np.random.SeedSequence(entropy=[self.seed, _ROW_STREAM, *key])
        rng = np.random.default_rng(ss)
        p = rng.dirichlet(np.full(self._vocab_size, self.dirichlet_alpha))
        if self.temperature != 1.0:
            with np.errstate(divide="ignore"):
                logs = np.log(p) / self.temperature
            logs -= logs.max()
            p = np.exp(logs)
        total = p.sum()
        if not np.isfinite(total) or total <= 0.0:
            raise RuntimeError("mock model produced an invalid row; alpha too extreme")
        p = p / total
        p.setflags(write=False)
        return p


def sample_mock_model(
    seed: int,
    vocab_size: int,
    order: int = 1,
    dirichlet_alpha: float = 1.0,
    temperature: float = 1.0,
) -> MockModel:
    """Build a MockModel; alias kept so configs read like the other factories."""
    return MockModel(
        seed=seed,
        vocab_size=vocab_size,
        order=order,
        dirichlet_alpha=dirichlet_alpha,
        temperature=temperature,
    )


@dataclass(frozen=True)
class RetokenizationChannel:
    """Similarity-biased token-edit channel.

    Each position is independently perturbed with probability p_flip; the
    replacement y != x is drawn with probability proportional to
    exp(-beta * squared embedding distance).  beta = 0 gives uniform edits,
    large beta keeps edits inside the original embedding neighbourhood.
    """

    p_flip: float
    beta: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= float(self.p_flip) <= 1.0:
            raise ValueError(f"p_flip must lie in [0, 1], got {self.p_flip}")
        if not (np.isfinite(float(self.beta)) and float(self.beta) >= 0.0):
            raise ValueError(f"beta must be a finite non-negative real, got {self.beta}")


def apply_retokenization(
    seq: TokenSequence,
    table: TokenEmbeddingTable,
    channel: RetokenizationChannel,
    rng: np.random.Generator,
) -> TokenSequence:
    """Push a sequence through the token-edit channel; length is preserved."""
    tokens = np.array(seq.tokens, dtype=np.int64)
    n = table.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= n):
        raise ValueError(f"token ids must lie in [0, {n}) to match the embedding table")
    if tokens.size == 0 or channel.p_flip == 0.0 or n < 2:
        return TokenSequence(tokens=tokens, prompt=seq.prompt)
    mask = rng.random(tokens.size) < channel.p_flip
    if not mask.any():
        return TokenSequence(tokens=tokens, prompt=seq.prompt)
    vectors = table.vectors.astype(np.float64)
    for pos in np.flatnonzero(mask):
        x = int(tokens[pos])
        if channel.beta == 0.0:
            y = int(rng.integers(n - 1))
            if y >= x:
                y += 1
        else:
            d2 = ((vectors - vectors[x]) ** 2).sum(axis=1)
            d2[x] = np.inf
            w = np.exp(-channel.beta * (d2 - d2.min()))
            cum = np.cumsum(w)
            y = int(np.searchsorted(cum, float(rng.random()) * cum[-1], side="right"))
        tokens[pos] = y
    return TokenSequence(tokens=tokens, prompt=seq.prompt)


def apply_substitution_attack(
    seq: TokenSequence,
    vocab_size: int,
    rate: float,
    rng: np.random.Generator,
) -> TokenSequence:
    """Replace each position, with probability `rate`, by a uniform other token."""
    rate = float(rate)
    vocab_size = int(vocab_size)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    tokens = np.array(seq.tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    if rate == 0.0 or tokens.size == 0:
        return TokenSequence(tokens=tokens, prompt=seq.prompt)
    if vocab_size < 2:
        raise ValueError("substitution needs a vocabulary of at least 2 tokens")
    mask = rng.random(tokens.size) < rate
    count = int(mask.sum())
    if count:
        repl = rng.integers(0, vocab_size - 1, size=count)
        repl = repl + (repl >= tokens[mask])
        tokens[mask] = repl
    return TokenSequence(tokens=tokens, prompt=seq.prompt)


# ---------------------------------------------------------------------------
# Versioned JSON config for channels and mock models.
# ---------------------------------------------------------------------------

SIM_CONFIG_VERSION = 1

_CHANNEL_KEYS = {"p_flip", "beta"}
_MODEL_KEYS = {"seed", "vocab_size", "order", "dirichlet_alpha", "temperature"}
_CODEBOOK_KEYS = {"seed", "vocab_size", "dim", "n_blobs", "separation", "blob_std"}


def load_sim_config(path) -> dict:
    """Parse a simulation config file.

    Schema (all sections optional):
      {"version": 1,
       "channel":  {"p_flip": 0.1, "beta": 40000.0},
       "model":    {"seed": 0, "vocab_size": 1024, "order": 1,
                    "dirichlet_alpha": 1.0, "temperature": 1.0},
       "codebook": {"seed": 0, "vocab_size": 1024, "dim": 16, "n_blobs": 16,
                    "separation": 0.5, "blob_std": 0.05}}

    Returns {"channel": RetokenizationChannel | None, "model": dict | None,
    "codebook": dict | None}.  Unknown keys are rejected by name.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    version = doc.get("version")
    if version != SIM_CONFIG_VERSION:
        raise ValueError(f"{path}: unsupported config version {version!r}")
    unknown = set(doc) - {"version", "channel", "model", "codebook"}
    if unknown:
        raise ValueError(f"{path}: unknown config key {sorted(unknown)[0]!r}")

    def section(name: str, allowed: set[str]) -> dict | None:
        sec = doc.get(name)
        if sec is None:
            return None
        if not isinstance(sec, dict):
            raise ValueError(f"{path}: section {name!r} must be an object")
        bad = set(sec) - allowed
        if bad:
            raise ValueError(f"{path}: unknown key {sorted(bad)[0]!r} in section {name!r}")
        return sec

    channel_sec = section("channel", _CHANNEL_KEYS)
    channel = (
        RetokenizationChannel(
            p_flip=float(channel_sec.get("p_flip", 0.0)),
            beta=float(channel_sec.get("beta", 0.0)),
        )
        if channel_sec is not None
        else None
    )
    return {
        "channel": channel,
        "model": section("model", _MODEL_KEYS),
        "codebook": section("codebook", _CODEBOOK_KEYS),
    }
