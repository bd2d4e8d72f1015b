import numpy as np
import pytest
from scipy import stats

from clustermark import (
    Clustering,
    GenerationConfig,
    TokenSequence,
    creweight_distribution,
    derive_code,
    generate_plain,
    generate_watermarked,
    load_sequence,
    save_sequence,
)
from clustermark.generate import _context_window

from conftest import ConstantModel, TableModel

CLUSTER6 = Clustering(h=2, assignment=np.array([0, 0, 0, 1, 1, 1]))
Q6 = np.array([0.4, 0.1, 0.1, 0.2, 0.1, 0.1])  # cluster masses 0.6 / 0.4


def one_hot_chain(n):
    """Deterministic cycle: token i is always followed by (i + 1) mod n."""
    m = np.zeros((n, n))
    m[np.arange(n), (np.arange(n) + 1) % n] = 1.0
    start = np.zeros(n)
    start[0] = 1.0
    return TableModel(m, start_row=start)


def test_one_hot_model_forces_greedy_sequence(key, other_key):
    model = one_hot_chain(6)
    cfg = GenerationConfig(length=8, h=2)
    for k in (key, other_key):
        seq = generate_watermarked(model, cfg, CLUSTER6, k, rng=np.random.default_rng(0))
        assert seq.tokens.tolist() == [0, 1, 2, 3, 4, 5, 0, 1]


def test_length_contract(key):
    with pytest.raises(ValueError):
        GenerationConfig(length=0, h=2)
    model = ConstantModel(Q6)
    cfg = GenerationConfig(length=5, h=2)
    seq = generate_watermarked(model, cfg, CLUSTER6, key, rng=np.random.default_rng(1))
    assert len(seq) == 5


def test_reproducible_given_seed(key):
    model = ConstantModel(Q6)
    cfg = GenerationConfig(length=64, h=2)
    a = generate_watermarked(model, cfg, CLUSTER6, key, rng=np.random.default_rng(9))
    b = generate_watermarked(model, cfg, CLUSTER6, key, rng=np.random.default_rng(9))
    assert np.array_equal(a.tokens, b.tokens)
    c = generate_plain(model, cfg, rng=np.random.default_rng(9))
    d = generate_plain(model, cfg, rng=np.random.default_rng(9))
    assert np.array_equal(c.tokens, d.tokens)


def test_deterministic_j_mode_pins_acceptance_draws(key):
    model = ConstantModel(Q6)
    cfg = GenerationConfig(length=40, h=2, deterministic_j=True)
    a = generate_watermarked(model, cfg, CLUSTER6, key, rng=np.random.default_rng(4))
    b = generate_watermarked(model, cfg, CLUSTER6, key, rng=np.random.default_rng(4))
    assert np.array_equal(a.tokens, b.tokens)


def test_plain_generation_matches_model_law_chi_square():
    model = ConstantModel(Q6)
    cfg = GenerationConfig(length=4, h=2)
    rng = np.random.default_rng(11)
    draws = np.concatenate(
        [generate_plain(model, cfg, rng=rng).tokens for _ in range(15_000)]
    )
    counts = np.bincount(draws, minlength=6)
    _, pvalue = stats.chisquare(counts, Q6 * counts.sum())
    assert pvalue > 1e-3


def test_config_mismatch_rejected(key):
    model = ConstantModel(Q6)
    with pytest.raises(ValueError):
        generate_watermarked(model, GenerationConfig(length=4, h=3), CLUSTER6, key)
    small = Clustering(h=2, assignment=np.array([0, 1]))
    with pytest.raises(ValueError):
        generate_watermarked(model, GenerationConfig(length=4, h=2), small, key)


def test_prompt_used_as_context_but_not_counted(key):
    model = ConstantModel(Q6)
    cfg = GenerationConfig(length=7, h=2)
    seq = generate_watermarked(
        model, cfg, CLUSTER6, key, prompt=[4, 5], rng=np.random.default_rng(3)
    )
    assert len(seq) == 7
    assert seq.prompt.tolist() == [4, 5]
    with pytest.raises(ValueError):
        generate_watermarked(model, cfg, CLUSTER6, key, prompt=[6])  # outside vocab


def test_context_window_sentinel_padding():
    assert _context_window([7], 3, 10) == (10, 10, 7)
    assert _context_window([], 2, 6) == (6, 6)
    assert _context_window([1, 2, 3, 4], 2, 6) == (3, 4)


def test_ngram_longer_than_prompt_generates(key):
    model = ConstantModel(Q6)
    cfg = GenerationConfig(length=6, h=2, ngram=3)
    seq = generate_watermarked(model, cfg, CLUSTER6, key, rng=np.random.default_rng(5))
    assert len(seq) == 6


def _conditional_second_token_samples(key, history_enabled, runs, seed):
    """Sample x2 | x1 == 0 with prompt [0]; context 0 repeats at step 2."""
    model = ConstantModel(Q6)
    cfg = GenerationConfig(length=2, h=2, history_enabled=history_enabled)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(runs):
        seq = generate_watermarked(model, cfg, CLUSTER6, key, prompt=[0], rng=rng)
        if seq.tokens[0] == 0:
            out.append(int(seq.tokens[1]))
    return np.bincount(out, minlength=6)


def test_repeated_context_reverts_to_model_law(key):
    # second use of context (0,) must sample the raw model law
    counts = _conditional_second_token_samples(key, True, runs=100_000, seed=31)
    _, pvalue = stats.chisquare(counts, Q6 * counts.sum())
    assert pvalue > 1e-3


def test_without_history_repeated_context_stays_reweighted(key):
    counts = _conditional_second_token_samples(key, False, runs=40_000, seed=32)
    code = derive_code(key, (0,), 2)
    expected = creweight_distribution(Q6, CLUSTER6, code.cluster_index)
    # no mass may leak outside the reweighted law's support
    support = expected > 0
    assert counts[~support].sum() == 0
    _, p_reweighted = stats.chisquare(counts[support], expected[support] * counts.sum())
    _, p_plain = stats.chisquare(counts, Q6 * counts.sum())
    assert p_reweighted > 1e-3
    assert p_plain < 1e-6


def test_persistent_history_suppresses_reweight_across_calls(key):
    model = ConstantModel(Q6)
    cfg = GenerationConfig(length=1, h=2)
    code = derive_code(key, (0,), 2)
    history = {code.code_id}
    rng = np.random.default_rng(33)
    draws = np.bincount(
        [
            int(generate_watermarked(model, cfg, CLUSTER6, key, prompt=[0], rng=rng, history=history).tokens[0])
            for _ in range(60_000)
        ],
        minlength=6,
    )
    _, pvalue = stats.chisquare(draws, Q6 * draws.sum())
    assert pvalue > 1e-3
    assert history == {code.code_id}  # history hits do not grow the set


# --- sequence file formats --------------------------------------------------


def test_sequence_text_roundtrip(tmp_path):
    seq = TokenSequence(tokens=np.array([5, 1, 2]), prompt=np.array([9]))
    path = tmp_path / "seq.txt"
    save_sequence(path, seq, format="text")
    loaded = load_sequence(path)
    assert np.array_equal(loaded.tokens, seq.tokens)
    assert np.array_equal(loaded.prompt, seq.prompt)


def test_sequence_binary_roundtrip(tmp_path):
    seq = TokenSequence(tokens=np.array([1, 2, 3, 70000]), prompt=np.array([], dtype=np.int64))
    path = tmp_path / "seq.bin"
    save_sequence(path, seq, format="binary")
    loaded = load_sequence(path)
    assert np.array_equal(loaded.tokens, seq.tokens)
    assert loaded.prompt.size == 0


def test_sequence_text_parse_error(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("12\nnot-a-token\n")
    with pytest.raises(ValueError, match="line 2"):
        load_sequence(path)


def test_sequence_binary_truncation_error(tmp_path):
    seq = TokenSequence(tokens=np.array([1, 2, 3]))
    path = tmp_path / "seq.bin"
    save_sequence(path, seq, format="binary")
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(ValueError, match="expected"):
        load_sequence(path)
