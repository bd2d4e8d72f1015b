import numpy as np
import pytest

from clustermark import (
    ChannelSpec,
    Clustering,
    DistortionCheckConfig,
    ExperimentConfig,
    MethodSpec,
    cluster_probabilities,
    creweight_distribution,
    mcnemar_exact,
    null_calibration,
    overflow_distribution,
    run_detectability_experiment,
    run_distortion_free_check,
    run_robustness_experiment,
    wilson_interval,
)


def test_distortion_free_check_passes():
    report = run_distortion_free_check(DistortionCheckConfig(n_distributions=60))
    assert report["passed"]
    assert report["max_deviation"] <= 1e-12
    assert report["cases"] == 60


def corrupted_conditional_law(p, clustering, target):
    """Broken variant accepting with min(1, q) instead of min(1, h*q)."""
    p = np.asarray(p, dtype=np.float64)
    q = cluster_probabilities(p, clustering)
    out = np.zeros_like(p)
    accept = min(1.0, float(q[target]))
    if accept > 0:
        m = clustering.members[target]
        out[m] = accept * p[m] / q[target]
    reject = 1.0 - accept
    if reject > 0:
        w = np.maximum(0.0, clustering.h * q - 1.0)
        if w.sum() > 0:
            w = w / w.sum()
            for c in np.flatnonzero(w):
                m = clustering.members[c]
                out[m] += reject * w[c] * p[m] / q[c]
        else:
            m = clustering.members[target]
            out[m] += reject * p[m] / q[target]
    return out


def test_corrupted_acceptance_rule_fails_the_check():
    rng = np.random.default_rng(0)
    clustering = Clustering(h=4, assignment=np.tile(np.arange(4), 8))
    worst = 0.0
    for _ in range(20):
        p = rng.dirichlet(np.ones(32))
        mean = sum(corrupted_conditional_law(p, clustering, c) for c in range(4)) / 4
        worst = max(worst, float(np.abs(mean - p).max()))
    assert worst > 1e-3


def _small_cfg(**kw):
    base = dict(
        methods=(MethodSpec("creweight", h=8), MethodSpec("dip", alpha=0.4), MethodSpec("kgw", delta=1.5)),
        channels=(ChannelSpec(),),
        trials=40,
        null_trials=40,
        seq_len=128,
        vocab_size=256,
        embed_dim=8,
        n_blobs=8,
        separation=0.5,
        blob_std=0.05,
        fprs=(0.01,),
        master_seed=7,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_detectability_experiment_small():
    table = run_detectability_experiment(_small_cfg())
    assert table.rate("creweight(h=8)", "identity", 0.01) >= 0.95
    for method in ("creweight(h=8)", "dip(alpha=0.4)", "kgw(delta=1.5,gamma=0.5)"):
        null_rate = table.rate(method, "identity", 0.01, role="null")
        assert null_rate <= 0.1
    roles = {row["role"] for row in table.rows}
    assert roles == {"watermarked", "null"}


def test_experiment_rerun_is_reproducible():
    a = run_detectability_experiment(_small_cfg(trials=15, null_trials=10))
    b = run_detectability_experiment(_small_cfg(trials=15, null_trials=10))
    assert a.statistics_rows() == b.statistics_rows()
    for k in a.pvalues:
        np.testing.assert_array_equal(a.pvalues[k], b.pvalues[k])


def test_parallel_jobs_match_serial():
    serial = run_detectability_experiment(_small_cfg(trials=12, null_trials=8, jobs=1))
    parallel = run_detectability_experiment(_small_cfg(trials=12, null_trials=8, jobs=2))
    assert serial.statistics_rows() == parallel.statistics_rows()


def test_result_table_io(tmp_path):
    table = run_detectability_experiment(
        _small_cfg(methods=(MethodSpec("creweight", h=8),), trials=10, null_trials=5)
    )
    csv_path = tmp_path / "table.csv"
    json_path = tmp_path / "table.json"
    table.to_csv(csv_path)
    table.to_json(json_path)
    text = csv_path.read_text()
    assert text.splitlines()[0].startswith("method,channel,role,fpr,positive_rate")
    assert "creweight(h=8)" in text
    import json

    doc = json.loads(json_path.read_text())
    assert doc["manifest"]["config"]["trials"] == 10
    assert len(doc["rows"]) == len(table.rows)


def test_robustness_monotone_under_stronger_edits():
    cfg = _small_cfg(
        methods=(MethodSpec("creweight", h=8),),
        channels=(
            ChannelSpec(),
            ChannelSpec(kind="retokenize", p_flip=0.6, beta=0.0),
        ),
        trials=60,
        null_trials=0,
        seq_len=96,
    )
    table = run_robustness_experiment(cfg)
    clean = table.rate("creweight(h=8)", "identity", 0.01)
    noisy = table.rate("creweight(h=8)", "retokenize(p_flip=0.6,beta=0.0)", 0.01)
    assert clean >= noisy


def test_power_grows_with_sequence_length():
    rates = []
    for t in (24, 96):
        cfg = _small_cfg(
            methods=(MethodSpec("creweight", h=8),),
            channels=(ChannelSpec(kind="substitute", rate=0.5),),
            trials=80,
            null_trials=0,
            seq_len=t,
            master_seed=3,
        )
        table = run_detectability_experiment(cfg)
        rates.append(table.rate("creweight(h=8)", "substitute(rate=0.5)", 0.01))
    assert rates[1] >= rates[0] + 0.2


def test_null_calibration_small():
    cfg = _small_cfg(methods=(MethodSpec("creweight", h=8),), trials=400, seq_len=128)
    report = null_calibration(cfg)
    assert report["dominance_ok"]
    assert 0.0 <= report["ks_distance"] <= 0.2
    for level in report["levels"]:
        assert level["ok"]


def test_null_calibration_requires_creweight():
    cfg = _small_cfg(methods=(MethodSpec("dip"),))
    with pytest.raises(ValueError):
        null_calibration(cfg)


def test_wilson_interval_known_values():
    lo, hi = wilson_interval(8, 10)
    assert abs(lo - 0.4902) < 5e-4
    assert abs(hi - 0.9433) < 5e-4
    assert wilson_interval(0, 0) == (0.0, 1.0)
    lo, hi = wilson_interval(0, 20)
    assert lo == 0.0 and hi > 0.0


def test_mcnemar_exact_hand_computed():
    a = np.array([True, True, True, False])
    b = np.array([False, False, True, False])
    out = mcnemar_exact(a, b)
    assert out["wins_a"] == 2 and out["wins_b"] == 0 and out["discordant"] == 2
    assert abs(out["p_value"] - 0.25) < 1e-12
    tie = mcnemar_exact(a, a)
    assert tie["p_value"] == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(methods=())
    with pytest.raises(ValueError):
        ExperimentConfig(trials=0)
    with pytest.raises(ValueError):
        ExperimentConfig(seq_len=1, ngram=1)
    with pytest.raises(ValueError):
        ExperimentConfig(fprs=(1.5,))
    with pytest.raises(ValueError):
        MethodSpec("unknown")
    with pytest.raises(ValueError):
        ChannelSpec(kind="bogus")
