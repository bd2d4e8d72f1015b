"""Watermarked and plain autoregressive generation over a pluggable model.

The model is anything with a `vocab_size` and a `next_distribution(context)`
returning the next-token law given all preceding ids.  The watermarked
generator keeps a per-call history of consumed codes: when the same context
n-gram recurs, it falls back to the unmodified model distribution, which is
what keeps the joint output law identical to plain sampling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .codebook import Clustering
from .codes import SecretKey, derive_code, derive_unit_uniform
from .reweight import creweight_sample

__all__ = [
    "ModelSource",
    "GenerationConfig",
    "TokenSequence",
    "generate_watermarked",
    "generate_plain",
    "save_sequence",
    "load_sequence",
]


class ModelSource(Protocol):
    """Next-token distribution source for ancestral sampling."""

    @property
    def vocab_size(self) -> int: ...

    def next_distribution(self, context: Sequence[int]) -> np.ndarray:
        """Return the next-token law given all preceding token ids."""
        ...


@dataclass(frozen=True)
class TokenSequence:
    """Generated token ids with an optional prompt prefix.

    Prompt ids serve as context but never count toward the generated length.
    """

    tokens: np.ndarray
    prompt: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        t = np.ascontiguousarray(np.asarray(self.tokens, dtype=np.int64))
        p = np.ascontiguousarray(np.asarray(self.prompt, dtype=np.int64))
        if t.ndim != 1 or p.ndim != 1:
            raise ValueError("token and prompt id arrays must be 1-D")
        if (t.size and t.min() < 0) or (p.size and p.min() < 0):
            raise ValueError("token ids must be non-negative")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "prompt", p)

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for one generation call.

    length: number of tokens to emit; h: cluster count (must match the
    clustering); ngram: context length feeding the code derivation;
    deterministic_j: derive the acceptance draw from the code instead of
    fresh randomness, for reproducible traces.
    """

    length: int
    h: int
    ngram: int = 1
    history_enabled: bool = True
    deterministic_j: bool = False

    def __post_init__(self) -> None:
        if int(self.length) < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")
        if int(self.h) < 1:
            raise ValueError(f"h must be >= 1, got {self.h}")
        if int(self.ngram) < 1:
            raise ValueError(f"ngram must be >= 1, got {self.ngram}")


def _context_window(ids: list[int], n: int, sentinel: int) -> tuple[int, ...]:
    """Last n ids, left-padded with the sentinel (= vocab_size) when short."""
    if len(ids) >= n:
        return tuple(ids[-n:])
    return (sentinel,) * (n - len(ids)) + tuple(ids)


def _prompt_ids(prompt, vocab_size: int) -> list[int]:
    if prompt is None:
        return []
    if isinstance(prompt, TokenSequence):
        ids = [int(x) for x in prompt.prompt] + [int(x) for x in prompt.tokens]
    else:
        ids = [int(x) for x in prompt]
    for t in ids:
        if not 0 <= t < vocab_size:
            raise ValueError(f"prompt token {t} outside vocabulary [0, {vocab_size})")
    return ids


def _sample(p: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(p)
    u = float(rng.random()) * cum[-1]
    return int(np.searchsorted(cum, u, side="right"))


def generate_watermarked(
    model: ModelSource,
    cfg: GenerationConfig,
    clustering: Clustering,
    key: SecretKey,
    prompt=None,
    rng: np.random.Generator | None = None,
    history: set[int] | None = None,
) -> TokenSequence:
    """Generate cfg.length tokens with the cluster-based watermark.

    At each step the code is derived from (key, last n ids); if its identity
    is already in the history the step samples the raw model law, otherwise
    the cluster-based reweight applies and the code is recorded.  Pass a
    `history` set to persist consumed codes across calls.
    """
    n_vocab = model.vocab_size
    if clustering.h != cfg.h:
        raise ValueError(f"clustering has h={clustering.h} but config has h={cfg.h}")
    if clustering.n_tokens != n_vocab:
        raise ValueError(
            f"clustering covers {clustering.n_tokens} tokens but model vocabulary is {n_vocab}"
        )
    rng = np.random.default_rng() if rng is None else rng
    hist = history if history is not None else set()
    ids = _prompt_ids(prompt, n_vocab)
    prompt_arr = np.asarray(ids, dtype=np.int64)
    out: list[int] = []
    for _ in range(cfg.length):
        p = np.asarray(model.next_distribution(ids), dtype=np.float64)
        ctx = _context_window(ids, cfg.ngram, n_vocab)
        code = derive_code(key, ctx, cfg.h)
        if cfg.history_enabled and code.code_id in hist:
            x = _sample(p, rng)
        else:
            j = derive_unit_uniform(key, ctx) if cfg.deterministic_j else None
            x = creweight_sample(p, clustering, code, rng, j=j)
            hist.add(code.code_id)
        ids.append(x)
        out.append(x)
    return TokenSequence(tokens=np.asarray(out, dtype=np.int64), prompt=prompt_arr)


def generate_plain(
    model: ModelSource,
    cfg: GenerationConfig,
    prompt=None,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    """Plain ancestral sampling; the null-hypothesis control for detection."""
    n_vocab = model.vocab_size
    rng = np.random.default_rng() if rng is None else rng
    ids = _prompt_ids(prompt, n_vocab)
    prompt_arr = np.asarray(ids, dtype=np.int64)
    out: list[int] = []
    for _ in range(cfg.length):
        p = np.asarray(model.next_distribution(ids), dtype=np.float64)
        x = _sample(p, rng)
        ids.append(x)
        out.append(x)
    return TokenSequence(tokens=np.asarray(out, dtype=np.int64), prompt=prompt_arr)


# ---------------------------------------------------------------------------
# Sequence file formats.
#
# Text: '#'-prefixed header lines, then one decimal token id per line.  The
# header records how many leading ids belong to the prompt:
#     # clustermark-seq v1
#     # prompt 0
# Binary (little-endian): magic b"CMSEQ001", uint32 version, uint64
# prompt_len, uint64 total_len, then total_len uint32 token ids.
# ---------------------------------------------------------------------------

_SEQ_MAGIC = b"CMSEQ001"
_SEQ_VERSION = 1
_SEQ_HEADER = struct.Struct("<8sIQQ")


def save_sequence(path, seq: TokenSequence, format: str = "text") -> None:
    ids = np.concatenate([seq.prompt, seq.tokens])
    if format == "text":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# clustermark-seq v{_SEQ_VERSION}\n")
            fh.write(f"# prompt {seq.prompt.size}\n")
            fh.writelines(f"{int(t)}\n" for t in ids)
    elif format == "binary":
        if ids.size and ids.max() >= 2**32:
            raise ValueError("token ids exceed the 32-bit binary format")
        with open(path, "wb") as fh:
            fh.write(_SEQ_HEADER.pack(_SEQ_MAGIC, _SEQ_VERSION, seq.prompt.size, ids.size))
            fh.write(ids.astype("<u4").tobytes())
    else:
        raise ValueError(f"unknown sequence format {format!r}")


def load_sequence(path) -> TokenSequence:
    """Load either sequence format, sniffing the binary magic."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] == _SEQ_MAGIC:
        if len(raw) < _SEQ_HEADER.size:
            raise ValueError(f"{path}: truncated sequence header")
        _, version, prompt_len, total = _SEQ_HEADER.unpack_from(raw, 0)
        if version != _SEQ_VERSION:
            raise ValueError(f"{path}: unsupported sequence version {version}")
        if prompt_len > total:
            raise ValueError(f"{path}: prompt length {prompt_len} exceeds total {total}")
        expected = _SEQ_HEADER.size + 4 * total
        if len(raw) != expected:
            raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
        ids = np.frombuffer(raw, dtype="<u4", count=total, offset=_SEQ_HEADER.size).astype(
            np.int64
        )
        return TokenSequence(tokens=ids[prompt_len:], prompt=ids[:prompt_len])
    prompt_len = 0
    ids = []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            parts = text[1:].split()
            if parts[:1] == ["prompt"]:
                prompt_len = int(parts[1])
            continue
        try:
            ids.append(int(text))
        except ValueError:
            raise ValueError(f"{path}: line {lineno} is not a token id: {text!r}") from None
    arr = np.asarray(ids, dtype=np.int64)
    if prompt_len > arr.size:
        raise ValueError(f"{path}: prompt length {prompt_len} exceeds {arr.size} ids")
    return TokenSequence(tokens=arr[prompt_len:], prompt=arr[:prompt_len])
