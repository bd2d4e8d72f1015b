"""Model-agnostic watermark detection with an exact binomial test.

The detector sees only the key, the clustering and the token ids.  For each
position with a full n-gram context it recomputes the watermark code and
scores 1 when the observed token lies in the prescribed cluster.  Under the
null the score is Binomial(scored_positions, 1/h), so thresholds derived
from the exact tail give a guaranteed false positive rate.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .codebook import Clustering
from .codes import SecretKey, WatermarkCode, derive_code
from .generate import TokenSequence

__all__ = [
    "DetectionReport",
    "score_token",
    "binomial_tail",
    "threshold_for_fpr",
    "detect",
]

# Above this trial count the regularized incomplete beta identity replaces
# direct summation; both paths agree to better than 1e-9 relative.
BETAINC_MIN_TRIALS = 100_000


def score_token(code: WatermarkCode, token: int, clustering: Clustering) -> int:
    """1 if the token lies in the code's prescribed cluster, else 0."""
    t = int(token)
    if not 0 <= t < clustering.n_tokens:
        raise ValueError(f"token {t} outside vocabulary [0, {clustering.n_tokens})")
    if not 0 <= code.cluster_index < clustering.h:
        raise ValueError(f"code cluster index {code.cluster_index} outside [0, {clustering.h})")
    return int(clustering.assignment[t] == code.cluster_index)


def _tail_by_summation(t: int, k: int, p: float) -> float:
    i = np.arange(k, t + 1, dtype=np.float64)
    logs = (
        special.gammaln(t + 1)
        - special.gammaln(i + 1)
        - special.gammaln(t - i + 1)
        + i * math.log(p)
        + (t - i) * math.log1p(-p)
    )
    return float(min(1.0, math.fsum(np.exp(logs))))


def _tail_by_betainc(t: int, k: int, p: float) -> float:
    return float(special.betainc(k, t - k + 1, p))


def _binomial_sf(t: int, k: int, p: float) -> float:
    """P(S >= k) for S ~ Binomial(t, p), exact in log space."""
    if k <= 0:
        return 1.0
    if t >= BETAINC_MIN_TRIALS:
        return _tail_by_betainc(t, k, p)
    return _tail_by_summation(t, k, p)


def binomial_tail(t: int, k: int, h: int) -> float:
    """Upper-tail probability P(S >= k) for S ~ Binomial(t, 1/h).

    Computed by log-space summation with compensated accumulation; for very
    long sequences (t >= BETAINC_MIN_TRIALS) the regularized incomplete beta
    identity is used instead.  Monotone non-increasing in k.
    """
    t = int(t)
    k = int(k)
    h = int(h)
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if h < 2:
        raise ValueError(f"h must be >= 2, got {h}")
    if k < 0 or k > t:
        raise ValueError(f"k must lie in [0, {t}], got {k}")
    return _binomial_sf(t, k, 1.0 / h)


def threshold_for_fpr(t: int, h: int, fpr: float) -> int:
    """Smallest score threshold whose analytic false positive rate is <= fpr.

    Deciding "watermarked" when S >= k* guarantees P(false positive) <= fpr
    exactly.  When even k = t cannot meet the bound the function warns and
    returns t + 1 (a detector that never fires).
    """
    t = int(t)
    h = int(h)
    fpr = float(fpr)
    if not 0.0 < fpr < 1.0:
        raise ValueError(f"fpr must lie in (0, 1), got {fpr}")
    if binomial_tail(t, t, h) > fpr:
        warnings.warn(
            f"no threshold achieves false positive rate {fpr} at t={t}, h={h}; "
            "returning t+1 (detection can never fire)",
            RuntimeWarning,
            stacklevel=2,
        )
        return t + 1
    lo, hi = 0, t  # tail(0) = 1 > fpr, tail(t) <= fpr
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if binomial_tail(t, mid, h) <= fpr:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class DetectionReport:
    """Outcome of one detection run.

    score is the number of scored positions whose token fell in the
    prescribed cluster; p_value is the exact binomial tail at that score;
    decision is p_value <= fpr.
    """

    score: int
    scored_positions: int
    h: int
    p_value: float
    decision: bool
    fpr: float
    flags: np.ndarray

    def to_dict(self, include_flags: bool = False) -> dict:
        doc = {
            "score": int(self.score),
            "scored_positions": int(self.scored_positions),
            "h": int(self.h),
            "p_value": float(self.p_value),
            "decision": bool(self.decision),
            "fpr": float(self.fpr),
        }
        if include_flags:
            doc["flags"] = [int(f) for f in self.flags]
        return doc

    def to_json(self, include_flags: bool = False) -> str:
        return json.dumps(self.to_dict(include_flags=include_flags), sort_keys=True)


def _extract_tokens(seq) -> np.ndarray:
    if isinstance(seq, TokenSequence):
        return np.asarray(seq.tokens, dtype=np.int64)
    return np.asarray(seq, dtype=np.int64)


def detect(
    seq,
    key: SecretKey,
    clustering: Clustering,
    ngram: int = 1,
    fpr: float = 0.01,
    dedup: bool = False,
) -> DetectionReport:
    """Score a token sequence for the watermark and report an exact p-value.

    Positions i in [ngram, len) are scored against the code recomputed from
    the preceding n-gram; prompt tokens are not assumed available and are
    never scored.  With `dedup` each distinct code is scored only at its
    first occurrence (keeps trials independent at some loss of power; off by
    default).  Pure function: identical inputs give identical reports.
    """
    tokens = _extract_tokens(seq)
    ngram = int(ngram)
    fpr = float(fpr)
    if ngram < 1:
        raise ValueError(f"ngram must be >= 1, got {ngram}")
    if not 0.0 < fpr < 1.0:
        raise ValueError(f"fpr must lie in (0, 1), got {fpr}")
    t = tokens.size
    if t <= ngram:
        raise ValueError(
            f"sequence too short: {t} tokens cannot be scored with ngram={ngram}"
        )
    if tokens.min() < 0 or tokens.max() >= clustering.n_tokens:
        raise ValueError(
            f"token ids must lie in [0, {clustering.n_tokens}) to match the clustering"
        )
    h = clustering.h
    assign = clustering.assignment
    if ngram == 1:
        prev = tokens[:-1]
        cur = tokens[1:]
        uniq, inverse = np.unique(prev, return_inverse=True)
        code_clusters = np.asarray(
            [derive_code(key, (int(u),), h).cluster_index for u in uniq], dtype=np.int64
        )
        hits = (assign[cur] == code_clusters[inverse]).astype(np.uint8)
        if dedup:
            first = np.sort(np.unique(inverse, return_index=True)[1])
            hits = hits[first]
        flags = hits
    else:
        memo: dict[tuple, int] = {}
        seen: set[tuple] = set()
        out: list[int] = []
        for i in range(ngram, t):
            ctx = tuple(int(x) for x in tokens[i - ngram : i])
            cluster = memo.get(ctx)
            if cluster is None:
                cluster = derive_code(key, ctx, h).cluster_index
                memo[ctx] = cluster
            if dedup:
                if ctx in seen:
                    continue
                seen.add(ctx)
            out.append(1 if assign[tokens[i]] == cluster else 0)
        flags = np.asarray(out, dtype=np.uint8)
    score = int(flags.sum())
    scored = int(flags.size)
    p_value = binomial_tail(scored, score, h) if h >= 2 else 1.0
    return DetectionReport(
        score=score,
        scored_positions=scored,
        h=h,
        p_value=float(p_value),
        decision=bool(p_value <= fpr),
        fpr=fpr,
        flags=flags,
    )
