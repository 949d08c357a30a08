import numpy as np
import pytest

from vfmtok import tensor as T
from vfmtok.ar import (ARConfig, ARModel, SamplingConfig, ar_loss, cfg_mix, next_token_logits, perplexity,
                       rope2d_apply, sample_sequence, train_ar)
from vfmtok.errors import ConfigError, ContractError
from vfmtok.suite import COMPOSED_TOL, check_ar_loss, randomize
from vfmtok.tensor import Tensor, no_grad


def _model(seed=0, **kw):
    base = dict(vocab=20, n_classes=3, layers=2, width=32, heads=2, seq_len=9, seed=seed)
    base.update(kw)
    return randomize(ARModel(ARConfig(**base)).astype(np.float64), seed, 0.1)


# -- 2D RoPE ------------------------------------------------------------------
def test_rope_origin_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 16)))
    np.testing.assert_array_equal(rope2d_apply(x, np.zeros((3, 2))).data, x.data)


def test_rope_preserves_norm():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 16))
    pos = rng.integers(0, 8, size=(5, 2))
    y = rope2d_apply(Tensor(x), pos).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-6)


@pytest.mark.parametrize("shift", [(1, 0), (0, 1), (3, 0), (0, 5), (-2, 0)])
def test_rope_relative_shift(shift):
    rng = np.random.default_rng(2)
    for _ in range(10):
        q, k = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
        p1, p2 = rng.integers(0, 8, size=(1, 2)), rng.integers(0, 8, size=(1, 2))
        d = np.array([shift])
        a = (rope2d_apply(Tensor(q), p1).data * rope2d_apply(Tensor(k), p2).data).sum()
        b = (rope2d_apply(Tensor(q), p1 + d).data * rope2d_apply(Tensor(k), p2 + d).data).sum()
        assert abs(a - b) < 1e-5


def test_rope_row_and_col_use_separate_halves():
    x = np.ones((1, 16))
    row = rope2d_apply(Tensor(x), np.array([[2, 0]])).data
    col = rope2d_apply(Tensor(x), np.array([[0, 2]])).data
    np.testing.assert_array_equal(row[0, 8:], x[0, 8:])
    np.testing.assert_array_equal(col[0, :8], x[0, :8])


def test_rope_rejects_indivisible_head_dim():
    with pytest.raises(ConfigError):
        rope2d_apply(Tensor(np.ones((2, 6))), np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        ARConfig(width=24, heads=4).validate()


# -- logits, cache, causality -------------------------------------------------
def test_kv_cache_matches_recompute_at_every_length():
    m = _model()
    rng = np.random.default_rng(0)
    for _ in range(5):
        full = rng.integers(0, 20, size=8)
        for L in range(0, 9):
            a = next_token_logits(m, full[:L], 1)
            b = next_token_logits(m, full[:L], 1, use_cache=True)
            assert np.abs(a - b).max() < 1e-5


def test_prefix_too_long_rejected():
    with pytest.raises(ContractError):
        next_token_logits(_model(), np.zeros(9, int), 0)


def test_ar_causality_by_perturbation():
    m = _model(1)
    rng = np.random.default_rng(1)
    for _ in range(10):
        seq = rng.integers(0, 20, size=(1, 8))
        j = int(rng.integers(0, 8))
        pert = seq.copy()
        pert[0, j] = (pert[0, j] + 1 + rng.integers(0, 19)) % 20
        with no_grad():
            a = m(np.array([2]), seq).data
            b = m(np.array([2]), pert).data
        # code j enters at slot j + 1, so slots 0..j are unaffected
        np.testing.assert_array_equal(a[0, : j + 1], b[0, : j + 1])


def test_null_class_changes_logits():
    m = _model(2)
    a = next_token_logits(m, np.array([1, 2]), 0)
    b = next_token_logits(m, np.array([1, 2]), m.cfg.null_class)
    assert not np.allclose(a, b)


def test_untrained_perplexity_near_vocab():
    m = ARModel(ARConfig(vocab=64, n_classes=4, layers=2, width=32, heads=2, seq_len=16))
    rng = np.random.default_rng(0)
    ppl = perplexity(m, rng.integers(0, 4, size=32), rng.integers(0, 64, size=(32, 16)))
    assert abs(ppl - 64) / 64 < 0.05


@pytest.mark.parametrize("seed", [0, 1])
def test_ar_loss_gradcheck(seed):
    assert check_ar_loss(seed)[0] < COMPOSED_TOL


# -- guidance and sampling ----------------------------------------------------
def test_cfg_mix_examples():
    u, c = np.array([0.0, 0.0]), np.array([1.0, 2.0])
    np.testing.assert_array_equal(cfg_mix(c, u, 2.0), [2.0, 4.0])
    np.testing.assert_array_equal(cfg_mix(c, u, 1.0), c)
    np.testing.assert_array_equal(cfg_mix(c, u, 0.0), u)
    x = np.random.default_rng(0).normal(size=5)
    for s in (0.0, 0.5, 1.0, 3.0):
        np.testing.assert_array_equal(cfg_mix(x, x, s), x)
    with pytest.raises(ContractError):
        cfg_mix(c, u, -1.0)


def test_sampling_deterministic_and_in_range():
    m = _model(3)
    a = sample_sequence(m, [0, 1, 2], SamplingConfig(seed=4))
    b = sample_sequence(m, [0, 1, 2], SamplingConfig(seed=4))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 9) and a.min() >= 0 and a.max() < 20
    g = sample_sequence(m, [0, 1, 2], SamplingConfig(cfg_scale=3.0, top_k=5, seed=4))
    assert g.min() >= 0 and g.max() < 20


def test_low_temperature_equals_greedy():
    m = _model(4)
    greedy = sample_sequence(m, [0, 1, 2], greedy=True)
    cold = sample_sequence(m, [0, 1, 2], SamplingConfig(temperature=1e-6, seed=11))
    np.testing.assert_array_equal(greedy, cold)
    np.testing.assert_array_equal(greedy, sample_sequence(m, [0, 1, 2], greedy=True))


def test_greedy_matches_stepwise_argmax():
    m = _model(5)
    seq = sample_sequence(m, [1], greedy=True)[0]
    for t in range(9):
        assert seq[t] == np.argmax(next_token_logits(m, seq[:t], 1))


def test_top_k_one_is_greedy():
    m = _model(6)
    np.testing.assert_array_equal(sample_sequence(m, [0, 2], SamplingConfig(top_k=1, seed=3)),
                                  sample_sequence(m, [0, 2], greedy=True))


def test_invalid_sampling_config():
    with pytest.raises(ConfigError):
        sample_sequence(_model(), [0], SamplingConfig(temperature=0.0))


# -- training -----------------------------------------------------------------
def test_single_sequence_memorization():
    cfg = ARConfig(vocab=64, n_classes=2, layers=2, width=32, heads=2, seq_len=16, lr=3e-3, batch_size=1,
                   class_dropout=0.0, embed_dropout=0.0)
    seq = np.random.default_rng(0).integers(0, 64, size=(1, 16))
    recs = []
    model = train_ar(np.array([1]), seq, cfg, 2000, metrics=recs.append, log_every=50)
    with no_grad():
        final = float(ar_loss(model, np.array([1]), seq).data)
    assert final < 0.01
    assert recs[-1]["perplexity"] < recs[0]["perplexity"]


def test_train_ar_rejects_out_of_vocab():
    with pytest.raises(ContractError):
        train_ar(np.array([0]), np.full((1, 9), 25), ARConfig(vocab=20, n_classes=1, seq_len=9, width=32,
                                                                heads=2, layers=1), 1)
