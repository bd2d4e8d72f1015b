"""Reweight strategies: the cluster-based rule plus two standard baselines.

The cluster-based rule perturbs the next-token distribution only at the
cluster level.  Given the code's target cluster i' with mass q = Pr(c_i'):

  * accept i' with probability min(1, h*q),
  * otherwise draw a replacement cluster with probability proportional to
    the overflow weight max(0, h*Pr(c) - 1),
  * then sample a token inside the chosen cluster proportionally to the
    model's own probabilities.

Averaged over a uniform target cluster this reproduces the model
distribution exactly, so the marginal output law is unchanged.
"""

from __future__ import annotations

import numpy as np

from .codebook import Clustering
from .codes import WatermarkCode

__all__ = [
    "validate_distribution",
    "cluster_probabilities",
    "overflow_distribution",
    "creweight_sample",
    "creweight_distribution",
    "dip_reweight",
    "kgw_reweight",
]

_SUM_ATOL = 1e-9


def validate_distribution(p, size: int | None = None, name: str = "p") -> np.ndarray:
    """Check a probability vector (finite, non-negative, sums to 1 within 1e-9)."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.size != size:
        raise ValueError(f"{name} has length {arr.size}, expected {size}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    if (arr < 0).any():
        raise ValueError(f"{name} contains negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > _SUM_ATOL:
        raise ValueError(f"{name} sums to {total}, expected 1 within {_SUM_ATOL}")
    return arr


def cluster_probabilities(p, clustering: Clustering) -> np.ndarray:
    """Total model mass per cluster: probs[i] = sum of p over cluster i."""
    arr = validate_distribution(p, size=clustering.n_tokens)
    return np.bincount(clustering.assignment, weights=arr, minlength=clustering.h)


def overflow_distribution(cd) -> np.ndarray:
    """Normalised excess mass max(0, h*Pr(c) - 1) over clusters.

    Only meaningful after a rejection, which requires at least one cluster
    with h*Pr(c) > 1; calling it when no cluster overflows is a logic error.
    """
    arr = validate_distribution(cd, name="cluster distribution")
    h = arr.size
    w = np.maximum(0.0, h * arr - 1.0)
    total = float(w.sum())
    if total <= 0.0:
        raise RuntimeError(
            "overflow distribution requested but no cluster overflows; "
            "a rejection cannot have occurred"
        )
    return w / total


def _overflow_weights(q: np.ndarray) -> tuple[np.ndarray, float]:
    w = np.maximum(0.0, q.size * q - 1.0)
    return w, float(w.sum())


def creweight_sample(
    p,
    clustering: Clustering,
    code: WatermarkCode,
    rng: np.random.Generator,
    *,
    j: float | None = None,
) -> int:
    """Draw one token under the cluster-based reweight rule.

    `j` overrides the fresh Uniform[0,1) acceptance draw (used by the
    deterministic-trace mode and by tests); the within-cluster draw always
    comes from `rng`.  Never returns a token with p[token] == 0.
    """
    arr = validate_distribution(p, size=clustering.n_tokens)
    h = clustering.h
    target = int(code.cluster_index)
    if not 0 <= target < h:
        raise ValueError(f"code cluster index {target} outside [0, {h})")
    q = np.bincount(clustering.assignment, weights=arr, minlength=h)
    if j is None:
        jj = float(rng.random())
    else:
        jj = float(j)
        if not 0.0 <= jj < 1.0:
            raise ValueError(f"acceptance draw must lie in [0, 1), got {jj}")
    if jj < h * q[target]:
        chosen = target
    else:
        w, total = _overflow_weights(q)
        if total <= 0.0:
            # Float-precision edge: every cluster sits exactly at mass 1/h, so
            # acceptance was certain up to rounding.  Fall back to the target.
            chosen = target
        else:
            u = float(rng.random()) * total
            chosen = int(np.searchsorted(np.cumsum(w), u, side="right"))
            chosen = min(chosen, h - 1)
    if q[chosen] <= 0.0:
        raise RuntimeError("internal error: selected cluster has zero probability mass")
    members = clustering.members[chosen]
    weights = arr[members]
    cum = np.cumsum(weights)
    u = float(rng.random()) * cum[-1]
    return int(members[np.searchsorted(cum, u, side="right")])


def creweight_distribution(p, clustering: Clustering, cluster_index: int) -> np.ndarray:
    """Exact conditional output law given the code's target cluster.

    Integrates the acceptance draw out analytically:

        min(1, h*q_i') * (p restricted to c_i') / q_i'
      + max(0, 1 - h*q_i') * sum_c overflow(c) * (p restricted to c) / q_c

    The uniform average of this law over all cluster indices equals p.
    """
    arr = validate_distribution(p, size=clustering.n_tokens)
    h = clustering.h
    i = int(cluster_index)
    if not 0 <= i < h:
        raise ValueError(f"cluster index {i} outside [0, {h})")
    q = np.bincount(clustering.assignment, weights=arr, minlength=h)
    out = np.zeros_like(arr)
    accept = min(1.0, h * float(q[i]))
    if accept > 0.0:
        m = clustering.members[i]
        out[m] = accept * (arr[m] / q[i])
    reject = 1.0 - accept
    if reject > 0.0:
        w, total = _overflow_weights(q)
        if total <= 0.0:
            # Same float edge as in creweight_sample: fold the residual back.
            m = clustering.members[i]
            out[m] += reject * (arr[m] / q[i])
        else:
            for c in np.flatnonzero(w > 0.0):
                m = clustering.members[c]
                out[m] += (reject * w[c] / total) * (arr[m] / q[c])
    return out


def dip_reweight(p, order, alpha: float, green_start: int | None = None) -> np.ndarray:
    """Two-block promotion baseline over a keyed token ordering.

    Token masses are laid on [0, 1] in `order` (demoted block first, promoted
    block last); the segment [0, alpha] is removed, [alpha, 1-alpha] kept and
    [1-alpha, 1] doubled.  `green_start` marks where the promoted block
    begins inside `order`; detection counts membership in that block.
    """
    arr = validate_distribution(p)
    n = arr.size
    order = np.asarray(order)
    if order.shape != (n,) or not np.issubdtype(order.dtype, np.integer):
        raise ValueError(f"order must be an integer permutation of length {n}")
    if not np.array_equal(np.bincount(order, minlength=n), np.ones(n, dtype=np.int64)):
        raise ValueError("order is not a permutation of the token ids")
    alpha = float(alpha)
    if not 0.0 <= alpha <= 0.5:
        raise ValueError(f"alpha must lie in [0, 0.5], got {alpha}")
    if green_start is not None and not 0 <= int(green_start) <= n:
        raise ValueError(f"green_start must lie in [0, {n}], got {green_start}")
    s = arr[order]
    cum = np.cumsum(s)
    bounds = np.concatenate(([0.0], cum / cum[-1]))
    lo, hi = bounds[:-1], bounds[1:]

    def overlap(a: float, b: float) -> np.ndarray:
        return np.maximum(0.0, np.minimum(hi, b) - np.maximum(lo, a))

    new_s = overlap(alpha, 1.0 - alpha) + 2.0 * overlap(1.0 - alpha, 1.0)
    out = np.empty_like(arr)
    out[order] = new_s
    return out


def kgw_reweight(p, green_set, delta: float) -> np.ndarray:
    """Green-list boosting baseline: multiply green-token mass by exp(delta).

    Biased (not distortion-free) but a standard detectability reference.
    `green_set` is either a boolean mask over the vocabulary or an array of
    token ids.
    """
    arr = validate_distribution(p)
    n = arr.size
    green = np.asarray(green_set)
    if green.dtype == np.bool_:
        if green.shape != (n,):
            raise ValueError(f"green mask must have length {n}")
        mask = green
    else:
        ids = green.astype(np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise ValueError("green token ids outside the vocabulary")
        mask = np.zeros(n, dtype=bool)
        mask[ids] = True
    delta = float(delta)
    if not np.isfinite(delta) or delta < 0.0:
        raise ValueError(f"delta must be a finite non-negative real, got {delta}")
    w = np.where(mask, arr * np.exp(delta), arr)
    return w / w.sum()
