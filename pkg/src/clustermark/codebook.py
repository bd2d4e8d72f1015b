"""Token embedding tables and the one-time k-means clustering of the vocabulary.

The clustering defines the equivalence classes shared by the watermark
embedder and the detector.  It is computed once per codebook, persisted to a
small binary container, and loaded read-only afterwards.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TokenEmbeddingTable",
    "Clustering",
    "CodebookFormatError",
    "ClusteringIntegrityError",
    "kmeans_cluster",
    "nearest_token",
    "adjusted_rand_index",
    "save_table",
    "load_table",
    "save_clustering",
    "load_clustering",
    "save_bundle",
    "export_table_json",
    "export_clustering_json",
]


class CodebookFormatError(ValueError):
    """A codebook/clustering file could not be parsed."""


class ClusteringIntegrityError(ValueError):
    """A clustering violates the partition invariants."""


@dataclass(frozen=True, eq=False)
class TokenEmbeddingTable:
    """Embedding vector per token id, stored row-major as float32.

    Row k is the embedding of token k.  Instances are immutable and safe to
    share across threads.
    """

    vectors: np.ndarray

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"embedding table must be 2-D and non-empty, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("embedding table contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def vocab_size(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenEmbeddingTable):
            return NotImplemented
        return self.vectors.shape == other.vectors.shape and np.array_equal(
            self.vectors, other.vectors
        )

    def __repr__(self) -> str:
        return f"TokenEmbeddingTable(vocab_size={self.vocab_size}, dim={self.dim})"


@dataclass(frozen=True, eq=False)
class Clustering:
    """Partition of token ids [0, N) into h non-empty clusters.

    `assignment[token] == cluster` and `members[cluster]` (sorted token ids)
    are kept mutually consistent; construction fails on any violation.
    """

    h: int
    assignment: np.ndarray
    members: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        a = np.ascontiguousarray(np.asarray(self.assignment, dtype=np.int32))
        if a.ndim != 1 or a.size < 1:
            raise ClusteringIntegrityError("assignment must be a non-empty 1-D array")
        h = int(self.h)
        if h < 1:
            raise ClusteringIntegrityError(f"cluster count must be >= 1, got {h}")
        if h > a.size:
            raise ClusteringIntegrityError(
                f"cluster count {h} exceeds vocabulary size {a.size}"
            )
        bad = np.flatnonzero((a < 0) | (a >= h))
        if bad.size:
            i = int(bad[0])
            raise ClusteringIntegrityError(
                f"token {i} assigned to cluster {int(a[i])}, outside [0, {h})"
            )
        counts = np.bincount(a, minlength=h)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise ClusteringIntegrityError(f"cluster {int(empty[0])} has no members")
        order = np.argsort(a, kind="stable")
        members = tuple(
            np.ascontiguousarray(part)
            for part in np.split(order, np.cumsum(counts)[:-1])
        )
        a.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "members", members)

    @property
    def n_tokens(self) -> int:
        return int(self.assignment.size)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.h)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Clustering):
            return NotImplemented
        return self.h == other.h and np.array_equal(self.assignment, other.assignment)

    def __repr__(self) -> str:
        return f"Clustering(h={self.h}, n_tokens={self.n_tokens})"


def _pairwise_sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of x (N,d) and c (h,d)."""
    d2 = (
        (x * x).sum(axis=1)[:, None]
        + (c * c).sum(axis=1)[None, :]
        - 2.0 * (x @ c.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeanspp_init(x: np.ndarray, h: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; the classic robust initialisation."""
    n = x.shape[0]
    centroids = np.empty((h, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, h):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[k] = x[idx]
        np.minimum(d2, ((x - centroids[k]) ** 2).sum(axis=1), out=d2)
    return centroids


def _lloyd(
    x: np.ndarray,
    centroids: np.ndarray,
    max_iters: int,
    tol: float,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations with deterministic empty-cluster repair.

    Returns (labels, centroids, per-iteration cost history).  The cost is the
    within-cluster sum of squares evaluated at the end of each iteration; it
    is non-increasing.
    """
    h = centroids.shape[0]
    n = x.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _pairwise_sq_dist(x, centroids)
        labels = np.argmin(d2, axis=1)  # ties -> lowest cluster id
        counts = np.bincount(labels, minlength=h)
        if (counts == 0).any():
            # Move the point farthest from its centroid into each empty
            # cluster, never draining a singleton donor.
            own = d2[np.arange(n), labels].copy()
            for e in np.flatnonzero(counts == 0):
                eligible = counts[labels] > 1
                idx = int(np.argmax(np.where(eligible, own, -np.inf)))
                counts[labels[idx]] -= 1
                labels[idx] = e
                counts[e] = 1
                own[idx] = 0.0
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        new_centroids = sums / counts[:, None]
        movement = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        history.append(float(((x - centroids[labels]) ** 2).sum()))
        if movement < tol:
            break
    return labels, centroids, history


def kmeans_cluster(
    table: TokenEmbeddingTable,
    h: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    n_init: int = 8,
) -> Clustering:
    """Cluster the token embeddings into h groups with seeded k-means.

    Deterministic for fixed (table, h, seed, max_iters, tol, n_init): the
    seeding, assignment tie-breaks (lowest cluster id) and empty-cluster
    repair are all reproducible.  `n_init` restarts are run and the lowest
    within-cluster sum of squares wins.
    """
    n = table.vocab_size
    h = int(h)
    if h < 1 or h > n:
        raise ValueError(f"cluster count must satisfy 1 <= h <= {n}, got {h}")
    if int(max_iters) < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if not (float(tol) >= 0.0):
        raise ValueError(f"tol must be non-negative, got {tol}")
    if int(n_init) < 1:
        raise ValueError(f"n_init must be >= 1, got {n_init}")
    if h == 1:
        return Clustering(h=1, assignment=np.zeros(n, dtype=np.int32))
    x = table.vectors.astype(np.float64)
    rng = np.random.default_rng(seed)
    best_labels: np.ndarray | None = None
    best_cost = np.inf
    for _ in range(int(n_init)):
        centroids = _kmeanspp_init(x, h, rng)
        labels, _, history = _lloyd(x, centroids, int(max_iters), float(tol))
        cost = history[-1]
        if cost < best_cost:
            best_cost = cost
            best_labels = labels
    assert best_labels is not None
    return Clustering(h=h, assignment=best_labels.astype(np.int32))


def nearest_token(table: TokenEmbeddingTable, query) -> int:
    """Token id whose embedding is nearest (squared Euclidean) to `query`.

    Ties break toward the lowest token id.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != table.dim:
        raise ValueError(f"query has dimension {q.shape[0]}, table has {table.dim}")
    d2 = ((table.vectors.astype(np.float64) - q) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two labelings of the same items."""
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if a.size != b.size or a.size == 0:
        raise ValueError("labelings must be non-empty and the same length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    ka, kb = int(ai.max()) + 1, int(bi.max()) + 1
    contingency = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(contingency, (ai, bi), 1)

    def comb2(v):
        return v * (v - 1) / 2.0

    sum_ij = comb2(contingency).sum()
    sum_a = comb2(contingency.sum(axis=1)).sum()
    sum_b = comb2(contingency.sum(axis=0)).sum()
    total = comb2(a.size)
    expected = sum_a * sum_b / total
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


# ---------------------------------------------------------------------------
# Binary container + JSON export.
#
# Layout (little-endian):
#   magic    8 bytes  b"CMCODEBK"
#   version  uint32   currently 1
#   flags    uint32   bit 0: embeddings present, bit 1: clustering present
#   n        uint64   vocabulary size
#   d        uint64   embedding dimension (0 when no embeddings)
#   h        uint64   cluster count (0 when no clustering)
#   [embeddings]  n*d float32, row-major
#   [assignment]  n uint32
# ---------------------------------------------------------------------------

_MAGIC = b"CMCODEBK"
_VERSION = 1
_HEADER = struct.Struct("<8sIIQQQ")
_FLAG_EMBEDDINGS = 1
_FLAG_CLUSTERING = 2


def _write_container(path, table: TokenEmbeddingTable | None, clustering: Clustering | None) -> None:
    if table is None and clustering is None:
        raise ValueError("nothing to write")
    if table is not None and clustering is not None and table.vocab_size != clustering.n_tokens:
        raise ValueError(
            f"embedding table covers {table.vocab_size} tokens but clustering covers "
            f"{clustering.n_tokens}"
        )
    flags = 0
    n = table.vocab_size if table is not None else clustering.n_tokens
    d = table.dim if table is not None else 0
    h = clustering.h if clustering is not None else 0
    if table is not None:
        flags |= _FLAG_EMBEDDINGS
    if clustering is not None:
        flags |= _FLAG_CLUSTERING
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, flags, n, d, h))
        if table is not None:
            fh.write(np.ascontiguousarray(table.vectors, dtype="<f4").tobytes())
        if clustering is not None:
            fh.write(np.ascontiguousarray(clustering.assignment, dtype="<u4").tobytes())


def _read_container(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CodebookFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, flags, n, d, h = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise CodebookFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CodebookFormatError(f"{path}: unsupported version {version}")
    if flags == 0 or flags & ~(_FLAG_EMBEDDINGS | _FLAG_CLUSTERING):
        raise CodebookFormatError(f"{path}: invalid flags field {flags:#x}")
    if n == 0:
        raise CodebookFormatError(f"{path}: field n must be positive")
    offset = _HEADER.size
    out: dict = {"n": n, "d": d, "h": h}
    if flags & _FLAG_EMBEDDINGS:
        if d == 0:
            raise CodebookFormatError(f"{path}: field d must be positive when embeddings are present")
        nbytes = 4 * n * d
        if len(raw) < offset + nbytes:
            raise CodebookFormatError(f"{path}: truncated embeddings block")
        out["vectors"] = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
        offset += nbytes
    if flags & _FLAG_CLUSTERING:
        if h == 0:
            raise CodebookFormatError(f"{path}: field h must be positive when a clustering is present")
        nbytes = 4 * n
        if len(raw) < offset + nbytes:
            raise CodebookFormatError(f"{path}: truncated assignment block")
        out["assignment"] = np.frombuffer(raw, dtype="<u4", count=n, offset=offset)
        offset += nbytes
    if offset != len(raw):
        raise CodebookFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return out


def save_table(path, table: TokenEmbeddingTable) -> None:
    _write_container(path, table, None)


def load_table(path) -> TokenEmbeddingTable:
    c = _read_container(path)
    if "vectors" not in c:
        raise CodebookFormatError(f"{path}: file has no embeddings section")
    return TokenEmbeddingTable(vectors=c["vectors"])


def save_clustering(path, clustering: Clustering) -> None:
    _write_container(path, None, clustering)


def load_clustering(path) -> Clustering:
    c = _read_container(path)
    if "assignment" not in c:
        raise CodebookFormatError(f"{path}: file has no clustering section")
    a = c["assignment"].astype(np.int64)
    if (a >= c["h"]).any():
        i = int(np.flatnonzero(a >= c["h"])[0])
        raise ClusteringIntegrityError(
            f"{path}: token {i} assigned to cluster {int(a[i])}, outside [0, {c['h']})"
        )
    return Clustering(h=int(c["h"]), assignment=a.astype(np.int32))


def save_bundle(path, table: TokenEmbeddingTable, clustering: Clustering) -> None:
    """Write embeddings and clustering together in one container."""
    _write_container(path, table, clustering)


def export_table_json(path, table: TokenEmbeddingTable) -> None:
    """Human-inspectable JSON mirror of the binary table format."""
    doc = {
        "format": "clustermark-codebook",
        "version": _VERSION,
        "n": table.vocab_size,
        "d": table.dim,
        "vectors": [[float(v) for v in row] for row in table.vectors],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_clustering_json(path, clustering: Clustering) -> None:
    doc = {
        "format": "clustermark-clustering",
        "version": _VERSION,
        "n": clustering.n_tokens,
        "h": clustering.h,
        "assignment": [int(c) for c in clustering.assignment],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
