import itertools
import struct

import numpy as np
import pytest

from clustermark import (
    Clustering,
    ClusteringIntegrityError,
    CodebookFormatError,
    TokenEmbeddingTable,
    adjusted_rand_index,
    export_clustering_json,
    export_table_json,
    kmeans_cluster,
    load_clustering,
    load_table,
    nearest_token,
    planted_assignment,
    save_bundle,
    save_clustering,
    save_table,
    synthesize_codebook,
)
from clustermark.codebook import _kmeanspp_init, _lloyd


def brute_force_best_partition(points, h):
    """Oracle: exhaustive search over all h-labelings minimizing WCSS."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    best_labels, best_cost = None, np.inf
    for labels in itertools.product(range(h), repeat=n):
        labels = np.asarray(labels)
        if len(set(labels.tolist())) != h:
            continue
        cost = 0.0
        for c in range(h):
            part = points[labels == c]
            cost += ((part - part.mean(axis=0)) ** 2).sum()
        if cost < best_cost:
            best_cost, best_labels = cost, labels
    return best_labels


def test_single_cluster_assigns_everything_to_zero(four_point_table):
    cl = kmeans_cluster(four_point_table, 1, seed=0)
    assert cl.h == 1
    assert (cl.assignment == 0).all()


def test_two_clusters_match_bruteforce_oracle(four_point_table):
    cl = kmeans_cluster(four_point_table, 2, seed=0)
    oracle = brute_force_best_partition(four_point_table.vectors, 2)
    assert adjusted_rand_index(cl.assignment, oracle) == 1.0
    groups = {tuple(m.tolist()) for m in cl.members}
    assert groups == {(0, 1), (2, 3)}


def test_all_singletons_when_h_equals_n():
    rng = np.random.default_rng(7)
    table = TokenEmbeddingTable(rng.normal(size=(6, 3)).astype(np.float32))
    cl = kmeans_cluster(table, 6, seed=1)
    assert sorted(len(m) for m in cl.members) == [1] * 6


def test_kmeans_invalid_arguments(four_point_table):
    with pytest.raises(ValueError):
        kmeans_cluster(four_point_table, 5, seed=0)
    with pytest.raises(ValueError):
        kmeans_cluster(four_point_table, 0, seed=0)
    with pytest.raises(ValueError):
        kmeans_cluster(four_point_table, 2, seed=0, max_iters=0)
    with pytest.raises(ValueError):
        TokenEmbeddingTable(np.array([[np.nan, 0.0]]))


def test_kmeans_deterministic_given_seed():
    rng = np.random.default_rng(3)
    table = TokenEmbeddingTable(rng.normal(size=(120, 5)).astype(np.float32))
    a = kmeans_cluster(table, 7, seed=42)
    b = kmeans_cluster(table, 7, seed=42)
    assert a == b


def test_partition_property_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n = int(rng.integers(10, 80))
        h = int(rng.integers(1, min(9, n)))
        table = TokenEmbeddingTable(rng.normal(size=(n, 3)).astype(np.float32))
        cl = kmeans_cluster(table, h, seed=int(rng.integers(1 << 31)))
        assert sum(len(m) for m in cl.members) == n
        for c, members in enumerate(cl.members):
            assert (cl.assignment[members] == c).all()
            assert (np.diff(members) > 0).all()  # sorted, unique
            assert len(members) > 0


def test_wcss_monotone_over_iterations():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 4))
    centroids = _kmeanspp_init(x, 6, rng)
    _, _, history = _lloyd(x, centroids, max_iters=40, tol=0.0)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_planted_blobs_recovered_exactly():
    table = synthesize_codebook(seed=9, vocab_size=180, dim=4, n_blobs=6, separation=0.6, blob_std=0.05)
    truth = planted_assignment(180, 6)
    cl = kmeans_cluster(table, 6, seed=17)
    assert adjusted_rand_index(cl.assignment, truth) == 1.0


def test_nearest_token_exact_match_and_tiebreak():
    vecs = (np.arange(16, dtype=np.float32).reshape(8, 2) + 1) * 10
    vecs[3] = (1.0, 0.0)
    vecs[7] = (-1.0, 0.0)
    table = TokenEmbeddingTable(vecs)
    assert nearest_token(table, vecs[5]) == 5
    # (0, 0) is equidistant from rows 3 and 7 -> lowest id wins
    assert nearest_token(table, (0.0, 0.0)) == 3


def test_nearest_token_bruteforce_scan(four_point_table):
    query = np.array([5.0, 5.0])
    d2 = ((four_point_table.vectors.astype(float) - query) ** 2).sum(axis=1)
    assert nearest_token(four_point_table, query) == int(np.argmin(d2))


def test_nearest_token_dimension_mismatch(four_point_table):
    with pytest.raises(ValueError):
        nearest_token(four_point_table, (1.0, 2.0, 3.0))


def test_adjusted_rand_index_extremes():
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert adjusted_rand_index(labels, labels) == 1.0
    assert adjusted_rand_index(labels, (labels + 1) % 3) == 1.0  # relabeling invariant
    rng = np.random.default_rng(0)
    noise = rng.integers(0, 3, size=600)
    truth = np.repeat(np.arange(3), 200)
    assert abs(adjusted_rand_index(truth, noise)) < 0.05


# --- persistence -----------------------------------------------------------


def test_table_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(21)
    table = TokenEmbeddingTable(rng.normal(size=(32, 5)).astype(np.float32))
    path = tmp_path / "table.cmk"
    save_table(path, table)
    assert load_table(path) == table


def test_clustering_roundtrip_bit_exact(tmp_path, four_point_table):
    cl = kmeans_cluster(four_point_table, 2, seed=0)
    path = tmp_path / "clusters.cmk"
    save_clustering(path, cl)
    assert load_clustering(path) == cl


def test_bundle_holds_both_sections(tmp_path, four_point_table):
    cl = kmeans_cluster(four_point_table, 2, seed=0)
    path = tmp_path / "bundle.cmk"
    save_bundle(path, four_point_table, cl)
    assert load_table(path) == four_point_table
    assert load_clustering(path) == cl


def test_table_only_file_has_no_clustering(tmp_path, four_point_table):
    path = tmp_path / "table.cmk"
    save_table(path, four_point_table)
    with pytest.raises(CodebookFormatError, match="no clustering"):
        load_clustering(path)


def _container_bytes(flags, n, d, h, payload=b""):
    return struct.pack("<8sIIQQQ", b"CMCODEBK", 1, flags, n, d, h) + payload


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.cmk"
    path.write_bytes(b"NOTMAGIC" + bytes(32))
    with pytest.raises(CodebookFormatError, match="magic"):
        load_table(path)


def test_load_rejects_truncated_blocks(tmp_path):
    path = tmp_path / "trunc.cmk"
    path.write_bytes(_container_bytes(1, 4, 2, 0, payload=b"\x00" * 8))
    with pytest.raises(CodebookFormatError, match="truncated embeddings"):
        load_table(path)


def test_load_rejects_out_of_range_assignment(tmp_path):
    payload = np.array([0, 1, 2, 0], dtype="<u4").tobytes()
    path = tmp_path / "range.cmk"
    path.write_bytes(_container_bytes(2, 4, 0, 2, payload=payload))
    with pytest.raises(ClusteringIntegrityError, match="outside"):
        load_clustering(path)


def test_load_rejects_empty_cluster(tmp_path):
    payload = np.array([0, 0, 0, 0], dtype="<u4").tobytes()
    path = tmp_path / "empty.cmk"
    path.write_bytes(_container_bytes(2, 4, 0, 2, payload=payload))
    with pytest.raises(ClusteringIntegrityError, match="no members"):
        load_clustering(path)


def test_clustering_constructor_enforces_partition():
    with pytest.raises(ClusteringIntegrityError):
        Clustering(h=2, assignment=np.array([0, 0, 2, 0]))
    with pytest.raises(ClusteringIntegrityError):
        Clustering(h=3, assignment=np.array([0, 1, 0, 1]))
    with pytest.raises(ClusteringIntegrityError):
        Clustering(h=5, assignment=np.array([0, 1, 2]))


def test_json_exports_parse(tmp_path, four_point_table):
    import json

    cl = kmeans_cluster(four_point_table, 2, seed=0)
    tp = tmp_path / "table.json"
    cp = tmp_path / "clusters.json"
    export_table_json(tp, four_point_table)
    export_clustering_json(cp, cl)
    tdoc = json.loads(tp.read_text())
    cdoc = json.loads(cp.read_text())
    assert tdoc["n"] == 4 and tdoc["d"] == 2 and len(tdoc["vectors"]) == 4
    assert cdoc["h"] == 2 and cdoc["assignment"] == [int(c) for c in cl.assignment]
