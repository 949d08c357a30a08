import numpy as np
import pytest

from vfmtok.errors import ContractError
from vfmtok.optim import AdamWState, adamw_step, global_grad_norm
from vfmtok.rng import Rng, splitmix64
from vfmtok.tensor import Tensor


def test_splitmix64_reference_values():
    # first outputs of the reference SplitMix64 generator seeded with 0
    words = splitmix64(0, np.arange(3, dtype=np.uint64))
    assert [int(w) for w in words] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_rng_deterministic_and_in_range():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.uniform(100), b.uniform(100))
    u = Rng(3).uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02
    n = Rng(4).normal(20000)
    assert abs(n.mean()) < 0.03 and abs(n.std() - 1) < 0.03


def test_spawn_streams_differ():
    r = Rng(5)
    assert not np.array_equal(r.spawn(1).uniform(8), r.spawn(2).uniform(8))
    np.testing.assert_array_equal(r.spawn(1).uniform(8), Rng(5).spawn(1).uniform(8))


def test_permutation_is_permutation():
    p = Rng(9).permutation(50)
    np.testing.assert_array_equal(np.sort(p), np.arange(50))


def _adamw_oracle(p, g, m, v, t, lr, b1, b2, wd, eps):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    return p - lr * (mh / (np.sqrt(vh) + eps) + wd * p), m, v


def test_adamw_matches_closed_form_over_steps():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    st = AdamWState([p], lr=1e-2, clip_norm=1e9)
    for t in range(1, 4):
        g = rng.normal(size=(3, 4)) * 0.1
        adamw_step([p], [g], st)
        ref, m, v = _adamw_oracle(ref, g, m, v, t, 1e-2, 0.9, 0.95, 0.05, 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)
    assert st.step_count == 3


def test_global_clip_applied_before_moments():
    p = Tensor(np.zeros(4), requires_grad=True)
    g = np.array([3.0, 4.0, 0.0, 0.0])
    st = AdamWState([p], lr=1.0, weight_decay=0.0)
    norm = adamw_step([p], [g], st)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(st.m[0], 0.1 * g / 5.0)
    assert global_grad_norm([g]) == pytest.approx(5.0)


def test_zero_grad_still_decays():
    p = Tensor(np.ones(2), requires_grad=True)
    st = AdamWState([p], lr=0.1)
    adamw_step([p], [np.zeros(2)], st)
    np.testing.assert_allclose(p.data, 1 - 0.1 * 0.05)


def test_mismatched_grad_shape_rejected():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        adamw_step([p], [np.ones(3)], AdamWState([p]))
