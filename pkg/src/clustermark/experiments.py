"""Monte-Carlo evaluation harness: detectability, robustness, calibration.

All randomness is derived from one master seed through named substreams, so
a re-run reproduces every trial bit for bit and all methods inside one
experiment see the same model, the same edit positions and the same trial
keys (differences are attributable to the watermarking strategy alone).
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from ._meta import __version__
from .codebook import Clustering, kmeans_cluster
from .codes import SecretKey, derive_stream_seed
from .detect import _binomial_sf, detect
from .generate import (
    GenerationConfig,
    TokenSequence,
    _context_window,
    _sample,
    generate_plain,
    generate_watermarked,
)
from .reweight import creweight_distribution, dip_reweight, kgw_reweight
from .simulate import (
    MockModel,
    RetokenizationChannel,
    apply_retokenization,
    apply_substitution_attack,
    synthesize_codebook,
)

__all__ = [
    "MethodSpec",
    "ChannelSpec",
    "ExperimentConfig",
    "ResultTable",
    "DistortionCheckConfig",
    "run_distortion_free_check",
    "run_detectability_experiment",
    "run_robustness_experiment",
    "null_calibration",
    "wilson_interval",
    "mcnemar_exact",
]

# Substream domains under the master seed.
_DOM_CODEBOOK = 1
_DOM_CLUSTER = 2
_DOM_MODEL = 3
_DOM_KEY = 4
_DOM_GEN = 5
_DOM_NULL = 6
_DOM_CHANNEL = 7

_DIP_LABEL = b"dip"
_KGW_LABEL = b"kgw"


def _subseed(master: int, domain: int, *extra: int) -> int:
    ss = np.random.SeedSequence(entropy=[int(master), int(domain), *map(int, extra)])
    return int(ss.generate_state(1, np.uint64)[0])


def _subrng(master: int, domain: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=[int(master), int(domain), *map(int, extra)])
    )


@dataclass(frozen=True)
class MethodSpec:
    """One watermarking method under test.

    kind "creweight" uses `h`; kind "dip" uses `alpha`; kind "kgw" uses
    `delta` and `gamma`.
    """

    kind: str
    h: int = 16
    alpha: float = 0.4
    delta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("creweight", "dip", "kgw"):
            raise ValueError(f"unknown method kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "creweight":
            return f"creweight(h={self.h})"
        if self.kind == "dip":
            return f"dip(alpha={self.alpha})"
        return f"kgw(delta={self.delta},gamma={self.gamma})"


@dataclass(frozen=True)
class ChannelSpec:
    """Post-generation attack applied before detection."""

    kind: str = "identity"
    p_flip: float = 0.0
    beta: float = 0.0
    rate: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "retokenize", "substitute"):
            raise ValueError(f"unknown channel kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "retokenize":
            return f"retokenize(p_flip={self.p_flip},beta={self.beta})"
        return f"substitute(rate={self.rate})"


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple = (MethodSpec("creweight"),)
    channels: tuple = (ChannelSpec(),)
    trials: int = 500
    null_trials: int | None = None  # defaults to `trials`
    seq_len: int = 256
    ngram: int = 1
    vocab_size: int = 1024
    embed_dim: int = 16
    n_blobs: int = 16
    separation: float = 0.5
    blob_std: float = 0.05
    model_order: int = 1
    dirichlet_alpha: float = 1.0
    temperature: float = 1.0
    fprs: tuple = (0.01, 0.001)
    master_seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "fprs", tuple(float(f) for f in self.fprs))
        if not self.methods:
            raise ValueError("at least one method is required")
        if not self.channels:
            raise ValueError("at least one channel is required")
        if int(self.trials) < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.null_trials is not None and int(self.null_trials) < 0:
            raise ValueError("null_trials must be >= 0")
        if int(self.seq_len) <= int(self.ngram):
            raise ValueError("seq_len must exceed ngram so positions can be scored")
        for f in self.fprs:
            if not 0.0 < f < 1.0:
                raise ValueError(f"fpr must lie in (0, 1), got {f}")
        if int(self.jobs) < 1:
            raise ValueError("jobs must be >= 1")
        for m in self.methods:
            if m.kind == "creweight" and not 1 <= m.h <= self.vocab_size:
                raise ValueError(
                    f"method {m.label()} has h outside [1, {self.vocab_size}]"
                )


# Per-process caches; trials are read-only consumers of these.
_TABLE_CACHE: dict = {}
_CLUSTER_CACHE: dict = {}
_MODEL_CACHE: dict = {}


def _table_key(cfg: ExperimentConfig) -> tuple:
    return (
        cfg.master_seed,
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.n_blobs,
        cfg.separation,
        cfg.blob_std,
    )


def _get_table(cfg: ExperimentConfig):
    key = _table_key(cfg)
    table = _TABLE_CACHE.get(key)
    if table is None:
        table = synthesize_codebook(
            seed=_subseed(cfg.master_seed, _DOM_CODEBOOK),
            vocab_size=cfg.vocab_size,
            dim=cfg.embed_dim,
            n_blobs=cfg.n_blobs,
            separation=cfg.separation,
            blob_std=cfg.blob_std,
        )
        _TABLE_CACHE[key] = table
    return table


def _get_clustering(cfg: ExperimentConfig, h: int) -> Clustering:
    key = (*_table_key(cfg), h)
    clustering = _CLUSTER_CACHE.get(key)
    if clustering is None:
        clustering = kmeans_cluster(
            _get_table(cfg), h, seed=_subseed(cfg.master_seed, _DOM_CLUSTER, h)
        )
        _CLUSTER_CACHE[key] = clustering
    return clustering


def _get_model(cfg: ExperimentConfig) -> MockModel:
    key = (
        cfg.master_seed,
        cfg.vocab_size,
        cfg.model_order,
        cfg.dirichlet_alpha,
        cfg.temperature,
    )
    model = _MODEL_CACHE.get(key)
    if model is None:
        model = MockModel(
            seed=_subseed(cfg.master_seed, _DOM_MODEL),
            vocab_size=cfg.vocab_size,
            order=cfg.model_order,
            dirichlet_alpha=cfg.dirichlet_alpha,
            temperature=cfg.temperature,
        )
        _MODEL_CACHE[key] = model
    return model


class _CReweightAdapter:
    def __init__(self, cfg: ExperimentConfig, spec: MethodSpec) -> None:
        self.clustering = _get_clustering(cfg, spec.h)
        self.gen_cfg = GenerationConfig(length=cfg.seq_len, h=spec.h, ngram=cfg.ngram)
        self.ngram = cfg.ngram

    def generate(self, model, key, rng) -> TokenSequence:
        return generate_watermarked(model, self.gen_cfg, self.clustering, key, rng=rng)

    def pvalue(self, seq, key) -> float:
        return detect(seq, key, self.clustering, ngram=self.ngram, fpr=0.5).p_value


class _DipAdapter:
    def __init__(self, cfg: ExperimentConfig, spec: MethodSpec) -> None:
        self.alpha = float(spec.alpha)
        self.n = cfg.vocab_size
        self.green_start = self.n // 2
        self.p_green = (self.n - self.green_start) / self.n
        self.ngram = cfg.ngram
        self.seq_len = cfg.seq_len

    def _order(self, key, ctx) -> np.ndarray:
        seed = derive_stream_seed(key, ctx, _DIP_LABEL)
        return np.random.default_rng(seed).permutation(self.n)

    def generate(self, model, key, rng) -> TokenSequence:
        ids: list[int] = []
        out: list[int] = []
        for _ in range(self.seq_len):
            p = np.asarray(model.next_distribution(ids), dtype=np.float64)
            ctx = _context_window(ids, self.ngram, self.n)
            order = self._order(key, ctx)
            pw = dip_reweight(p, order, self.alpha, self.green_start)
            x = _sample(pw, rng)
            ids.append(x)
            out.append(x)
        return TokenSequence(tokens=np.asarray(out, dtype=np.int64))

    def pvalue(self, seq, key) -> float:
        tokens = [int(x) for x in seq.tokens]
        ranks: dict[tuple, np.ndarray] = {}
        hits = 0
        scored = 0
        for i in range(self.ngram, len(tokens)):
            ctx = tuple(tokens[i - self.ngram : i])
            inv = ranks.get(ctx)
            if inv is None:
                order = self._order(key, ctx)
                inv = np.empty(self.n, dtype=np.int64)
                inv[order] = np.arange(self.n)
                ranks[ctx] = inv
            hits += int(inv[tokens[i]] >= self.green_start)
            scored += 1
        return _binomial_sf(scored, hits, self.p_green)


class _KgwAdapter:
    """Green-count detector with the standard normal-approximation z score."""

    def __init__(self, cfg: ExperimentConfig, spec: MethodSpec) -> None:
        self.delta = float(spec.delta)
        self.gamma = float(spec.gamma)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        self.n = cfg.vocab_size
        self.green_count = int(round(self.gamma * self.n))
        self.green_count = min(max(self.green_count, 1), self.n - 1)
        self.p_green = self.green_count / self.n
        self.ngram = cfg.ngram
        self.seq_len = cfg.seq_len

    def _green_mask(self, key, ctx) -> np.ndarray:
        seed = derive_stream_seed(key, ctx, _KGW_LABEL)
        order = np.random.default_rng(seed).permutation(self.n)
        mask = np.zeros(self.n, dtype=bool)
        mask[order[: self.green_count]] = True
        return mask

    def generate(self, model, key, rng) -> TokenSequence:
        ids: list[int] = []
        out: list[int] = []
        for _ in range(self.seq_len):
            p = np.asarray(model.next_distribution(ids), dtype=np.float64)
            ctx = _context_window(ids, self.ngram, self.n)
            pw = kgw_reweight(p, self._green_mask(key, ctx), self.delta)
            x = _sample(pw, rng)
            ids.append(x)
            out.append(x)
        return TokenSequence(tokens=np.asarray(out, dtype=np.int64))

    def pvalue(self, seq, key) -> float:
        tokens = [int(x) for x in seq.tokens]
        masks: dict[tuple, np.ndarray] = {}
        hits = 0
        scored = 0
        for i in range(self.ngram, len(tokens)):
            ctx = tuple(tokens[i - self.ngram : i])
            mask = masks.get(ctx)
            if mask is None:
                mask = self._green_mask(key, ctx)
                masks[ctx] = mask
            hits += int(mask[tokens[i]])
            scored += 1
        z = (hits - self.p_green * scored) / math.sqrt(
            self.p_green * (1.0 - self.p_green) * scored
        )
        return float(0.5 * special.erfc(z / math.sqrt(2.0)))


def _make_adapter(cfg: ExperimentConfig, spec: MethodSpec):
    if spec.kind == "creweight":
        return _CReweightAdapter(cfg, spec)
    if spec.kind == "dip":
        return _DipAdapter(cfg, spec)
    return _KgwAdapter(cfg, spec)


def _apply_channel(cfg: ExperimentConfig, channel: ChannelSpec, seq: TokenSequence, trial: int) -> TokenSequence:
    if channel.kind == "identity":
        return seq
    rng = _subrng(cfg.master_seed, _DOM_CHANNEL, trial)
    if channel.kind == "retokenize":
        return apply_retokenization(
            seq,
            _get_table(cfg),
            RetokenizationChannel(p_flip=channel.p_flip, beta=channel.beta),
            rng,
        )
    return apply_substitution_attack(seq, cfg.vocab_size, channel.rate, rng)


def _run_block(args) -> np.ndarray:
    """One worker unit: p-values for a list of trials (picklable entry point)."""
    cfg, method, channel, role, trials = args
    model = _get_model(cfg)
    adapter = _make_adapter(cfg, method)
    plain_cfg = GenerationConfig(length=cfg.seq_len, h=1, ngram=cfg.ngram)
    pvals = np.empty(len(trials), dtype=np.float64)
    for pos, trial in enumerate(trials):
        key = SecretKey(_subrng(cfg.master_seed, _DOM_KEY, trial).bytes(32))
        if role == "watermarked":
            seq = adapter.generate(model, key, _subrng(cfg.master_seed, _DOM_GEN, trial))
        else:
            seq = generate_plain(model, plain_cfg, rng=_subrng(cfg.master_seed, _DOM_NULL, trial))
        seq = _apply_channel(cfg, channel, seq, trial)
        pvals[pos] = adapter.pvalue(seq, key)
    return pvals


def _run_role(cfg: ExperimentConfig, method: MethodSpec, channel: ChannelSpec, role: str, n_trials: int) -> np.ndarray:
    trials = list(range(int(n_trials)))
    if cfg.jobs <= 1 or len(trials) < 2:
        return _run_block((cfg, method, channel, role, trials))
    blocks = [list(b) for b in np.array_split(trials, min(cfg.jobs, len(trials)))]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        parts = list(pool.map(_run_block, [(cfg, method, channel, role, b) for b in blocks]))
    return np.concatenate(parts)


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson 95% score interval for a binomial proportion."""
    if trials <= 0:
        return (0.0, 1.0)
    phat = successes / trials
    denom = 1.0 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1.0 - phat) / trials + z * z / (4.0 * trials * trials)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def mcnemar_exact(decisions_a, decisions_b) -> dict:
    """One-sided exact McNemar test that method A beats method B.

    Considers only discordant paired trials; under the null the number of
    A-wins is Binomial(discordant, 1/2).  Small p-value means A detects
    strictly more often than B on paired inputs.
    """
    a = np.asarray(decisions_a, dtype=bool)
    b = np.asarray(decisions_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("paired decision arrays must have the same shape")
    wins_a = int(np.sum(a & ~b))
    wins_b = int(np.sum(b & ~a))
    discordant = wins_a + wins_b
    p = _binomial_sf(discordant, wins_a, 0.5) if discordant > 0 else 1.0
    return {
        "wins_a": wins_a,
        "wins_b": wins_b,
        "discordant": discordant,
        "p_value": float(p),
    }


_CSV_FIELDS = [
    "method",
    "channel",
    "role",
    "fpr",
    "positive_rate",
    "wilson_low",
    "wilson_high",
    "mean_p_value",
    "trials",
    "wall_time_s",
]


@dataclass
class ResultTable:
    """Tabulated experiment results plus raw per-trial p-values.

    `pvalues` is keyed by (method label, channel label, role) and preserves
    trial order, so paired per-trial comparisons across methods are exact.
    """

    rows: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    pvalues: dict = field(default_factory=dict)

    def decisions(self, method: str, channel: str, fpr: float, role: str = "watermarked") -> np.ndarray:
        return self.pvalues[(method, channel, role)] <= float(fpr)

    def rate(self, method: str, channel: str, fpr: float, role: str = "watermarked") -> float:
        d = self.decisions(method, channel, fpr, role)
        return float(d.mean())

    def statistics_rows(self) -> list:
        """Rows with the timing column removed (for reproducibility checks)."""
        return [{k: v for k, v in row.items() if k != "wall_time_s"} for row in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            for row in self.rows:
                out = dict(row)
                for k, v in out.items():
                    if isinstance(v, float):
                        out[k] = f"{v:.12g}"
                writer.writerow(out)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"manifest": self.manifest, "rows": self.rows}, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_manifest(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _summary_row(method: MethodSpec, channel: ChannelSpec, role: str, fpr: float, pvals: np.ndarray, wall: float) -> dict:
    decisions = pvals <= fpr
    k = int(decisions.sum())
    n = int(decisions.size)
    lo, hi = wilson_interval(k, n)
    return {
        "method": method.label(),
        "channel": channel.label(),
        "role": role,
        "fpr": float(fpr),
        "positive_rate": k / n,
        "wilson_low": lo,
        "wilson_high": hi,
        "mean_p_value": float(pvals.mean()),
        "trials": n,
        "wall_time_s": wall,
    }


def _execute(cfg: ExperimentConfig, experiment: str) -> ResultTable:
    rows: list = []
    pvalues: dict = {}
    null_trials = cfg.trials if cfg.null_trials is None else int(cfg.null_trials)
    for channel in cfg.channels:
        for method in cfg.methods:
            t0 = time.perf_counter()
            pv = _run_role(cfg, method, channel, "watermarked", cfg.trials)
            wall = time.perf_counter() - t0
            pvalues[(method.label(), channel.label(), "watermarked")] = pv
            for fpr in cfg.fprs:
                rows.append(_summary_row(method, channel, "watermarked", fpr, pv, wall))
            if null_trials > 0:
                t0 = time.perf_counter()
                pv0 = _run_role(cfg, method, channel, "null", null_trials)
                wall0 = time.perf_counter() - t0
                pvalues[(method.label(), channel.label(), "null")] = pv0
                for fpr in cfg.fprs:
                    rows.append(_summary_row(method, channel, "null", fpr, pv0, wall0))
    manifest = {
        "tool": "clustermark",
        "version": __version__,
        "experiment": experiment,
        "config": asdict(cfg),
    }
    return ResultTable(rows=rows, manifest=manifest, pvalues=pvalues)


def run_detectability_experiment(cfg: ExperimentConfig) -> ResultTable:
    """True-positive rate at guaranteed false positive rates, per method.

    Generates watermarked and null sequences, pushes both through the
    configured channel(s), detects with each method's own statistic, and
    tabulates positive rates with Wilson intervals.
    """
    return _execute(cfg, "detectability")


def run_robustness_experiment(cfg: ExperimentConfig) -> ResultTable:
    """Detectability swept over a grid of attack channels (paired trials)."""
    return _execute(cfg, "robustness")


def null_calibration(cfg: ExperimentConfig, levels=(0.05, 0.01, 0.005, 0.001)) -> dict:
    """Calibration of the exact test on unwatermarked sequences.

    Reports the Kolmogorov-Smirnov distance of the p-value sample from
    uniform (discreteness makes it super-uniform) and, per nominal level,
    whether the empirical rate stays below nominal + 3 sigma.
    """
    method = cfg.methods[0]
    if method.kind != "creweight":
        raise ValueError("null_calibration expects a creweight method first")
    pv = _run_role(cfg, method, ChannelSpec(), "null", cfg.trials)
    m = pv.size
    sorted_p = np.sort(pv)
    ecdf_hi = np.arange(1, m + 1) / m
    ecdf_lo = np.arange(0, m) / m
    ks = float(max((ecdf_hi - sorted_p).max(), (sorted_p - ecdf_lo).max()))
    level_rows = []
    for alpha in levels:
        emp = float((pv <= alpha).mean())
        sigma = math.sqrt(alpha * (1.0 - alpha) / m)
        level_rows.append(
            {
                "fpr": float(alpha),
                "empirical": emp,
                "bound": float(alpha + 3.0 * sigma),
                "ok": bool(emp <= alpha + 3.0 * sigma),
            }
        )
    grid = np.linspace(0.002, 0.5, 64)
    emp_grid = (pv[None, :] <= grid[:, None]).mean(axis=1)
    sig_grid = np.sqrt(grid * (1.0 - grid) / m)
    dominance_ok = bool((emp_grid <= grid + 3.0 * sig_grid).all())
    return {
        "trials": int(m),
        "seq_len": cfg.seq_len,
        "h": method.h,
        "ks_distance": ks,
        "mean_p_value": float(pv.mean()),
        "levels": level_rows,
        "dominance_ok": dominance_ok,
    }


@dataclass(frozen=True)
class DistortionCheckConfig:
    n_distributions: int = 100
    vocab_sizes: tuple = (8, 16, 32, 64)
    cluster_counts: tuple = (2, 4, 8)
    seed: int = 20240501
    tolerance: float = 1e-12


def run_distortion_free_check(cfg: DistortionCheckConfig = DistortionCheckConfig()) -> dict:
    """Exact marginalization check: averaging the conditional watermarked law
    over a uniform target cluster must reproduce the model distribution.

    Exercises random Dirichlet distributions plus one-hot and zero-mass-
    cluster edge cases.  Sizes are capped (N <= 64, h <= 8) so the exact
    path stays fast.
    """
    if max(cfg.vocab_sizes) > 64 or max(cfg.cluster_counts) > 8:
        raise ValueError("exact marginalization path expects N <= 64 and h <= 8")
    rng = np.random.default_rng(cfg.seed)
    max_dev = 0.0
    cases = 0
    for i in range(cfg.n_distributions):
        n = int(rng.choice(cfg.vocab_sizes))
        h = int(rng.choice([c for c in cfg.cluster_counts if c <= n]))
        assignment = np.concatenate(
            [np.arange(h), rng.integers(0, h, size=n - h)]
        ).astype(np.int32)
        rng.shuffle(assignment)
        clustering = Clustering(h=h, assignment=assignment)
        style = i % 3
        if style == 0:
            p = rng.dirichlet(np.full(n, float(rng.uniform(0.2, 3.0))))
        elif style == 1:
            p = np.zeros(n)
            p[int(rng.integers(n))] = 1.0
        else:
            p = rng.dirichlet(np.ones(n))
            dead = int(rng.integers(h))
            p[clustering.members[dead]] = 0.0
            if p.sum() <= 0.0:  # the zeroed cluster held everything; rare
                p = np.full(n, 1.0 / n)
            p = p / p.sum()
        mean = np.zeros(n)
        for target in range(h):
            mean += creweight_distribution(p, clustering, target)
        mean /= h
        max_dev = max(max_dev, float(np.abs(mean - p).max()))
        cases += 1
    return {
        "cases": cases,
        "max_deviation": max_dev,
        "tolerance": cfg.tolerance,
        "passed": bool(max_dev <= cfg.tolerance),
    }
