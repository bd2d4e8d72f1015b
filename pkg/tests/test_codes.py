import numpy as np
import pytest
from scipy import stats

from clustermark import SecretKey, derive_code, derive_stream_seed, derive_unit_uniform


def test_derive_code_deterministic(key):
    a = derive_code(key, (5, 9), 16)
    b = derive_code(key, (5, 9), 16)
    assert a == b


def test_single_cluster_always_zero(key):
    for ctx in [(0,), (123,), (7, 8, 9)]:
        assert derive_code(key, ctx, 1).cluster_index == 0


def test_code_id_independent_of_cluster_count(key):
    # the dedup identity must not change when h is reconfigured
    ids = {derive_code(key, (42,), h).code_id for h in (1, 2, 7, 100)}
    assert len(ids) == 1


def test_cluster_index_in_range(key):
    for h in (2, 3, 5, 17):
        for ctx in range(50):
            assert 0 <= derive_code(key, (ctx,), h).cluster_index < h


def test_cluster_index_uniformity_chi_square(key):
    h = 16
    counts = np.bincount(
        [derive_code(key, (i,), h).cluster_index for i in range(100_000)], minlength=h
    )
    expected = 100_000 / h
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    lo, hi = stats.chi2.ppf([0.005, 0.995], df=h - 1)
    assert lo <= chi2 <= hi, f"chi2={chi2} outside 99% band [{lo}, {hi}]"


def test_different_keys_give_different_codes(key, other_key):
    same = sum(
        derive_code(key, (i,), 64).cluster_index == derive_code(other_key, (i,), 64).cluster_index
        for i in range(2000)
    )
    # collision rate should be ~1/64, nowhere near 1
    assert same < 2000 * 0.1


def test_context_sensitivity(key):
    codes = {derive_code(key, (i, j), 1 << 30).code_id for i in range(30) for j in range(30)}
    assert len(codes) == 900


def test_validation_errors(key):
    with pytest.raises(ValueError):
        derive_code(key, (), 4)
    with pytest.raises(ValueError):
        derive_code(key, (1,), 0)
    with pytest.raises(ValueError):
        derive_code(key, (-3,), 4)
    with pytest.raises(TypeError):
        derive_code(b"raw-bytes-not-a-key", (1,), 4)


def test_key_material_rules():
    with pytest.raises(ValueError):
        SecretKey(b"short")
    k = SecretKey.generate()
    assert len(k.material) == 32
    assert k == SecretKey.from_hex(k.to_hex())
    assert "bytes" in repr(k) and k.to_hex() not in repr(k)


def test_key_file_and_env_roundtrip(tmp_path, monkeypatch):
    k = SecretKey.generate()
    path = tmp_path / "key.hex"
    path.write_text(k.to_hex() + "\n")
    assert SecretKey.from_file(path) == k
    monkeypatch.setenv("CLUSTERMARK_KEY", k.to_hex())
    assert SecretKey.from_env() == k
    monkeypatch.delenv("CLUSTERMARK_KEY")
    with pytest.raises(KeyError):
        SecretKey.from_env()


def test_unit_uniform_deterministic_and_spread(key):
    us = np.array([derive_unit_uniform(key, (i,)) for i in range(20_000)])
    assert derive_unit_uniform(key, (3,)) == derive_unit_uniform(key, (3,))
    assert (us >= 0).all() and (us < 1).all()
    assert abs(us.mean() - 0.5) < 0.01
    assert abs(us.var() - 1 / 12) < 0.005


def test_stream_seed_label_separation(key):
    a = derive_stream_seed(key, (5,), b"dip")
    b = derive_stream_seed(key, (5,), b"kgw")
    assert a != b
    assert derive_stream_seed(key, (5,), b"dip") == a
    with pytest.raises(ValueError):
        derive_stream_seed(key, (5,), b"")
