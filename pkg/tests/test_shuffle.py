import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from eiwflow import shuffle as S
from eiwflow import tensor as T
from eiwflow.flow import MultiScaleFlow, split
from eiwflow.tensor import Tensor, backward
from helpers import central_diff, rel_err


def unit(channels=8, r=4, seed=0):
    return S.ShuffleUnit(channels, r, np.random.default_rng(seed))


def test_solver_uniform_at_init_and_deterministic():
    u = unit(8)
    q1, q2 = u.solver_eval().data, u.solver_eval().data
    assert np.abs(q1 - 1 / 8).max() < 1e-12
    np.testing.assert_array_equal(q1, q2)


def test_solver_layer_shapes():
    s = S.SolverNet(12, np.random.default_rng(0))
    assert s.w1.shape == (6, 1) and s.w2.shape == (6, 6) and s.w3.shape == (12, 6)
    g = S.GuiderNet(12, 4, np.random.default_rng(0))
    assert g.w1.shape == (3, 12) and g.w2.shape == (12, 3)


def test_solver_step_raises_target_weight():
    u = unit(8, seed=1)
    j = 5
    before = u.solver_eval().data[j]
    logits = u.solver.logits()
    params = list(u.solver.parameters().values())
    grads = backward(T.take(logits, j, j + 1, 0).sum(), params)
    for p in params:
        p.data += 1e-2 * grads[p]
    assert u.solver_eval().data[j] > before


def test_guider_uniform_when_zero_initialized():
    u = unit(8)
    x = Tensor(np.random.default_rng(2).standard_normal((3, 8, 2, 2)))
    np.testing.assert_allclose(u.guider_eval(x).data, 1 / 8, atol=1e-15)


def test_guider_depends_on_data():
    rng = np.random.default_rng(3)
    g = S.GuiderNet(8, 2, rng)
    for p in g.parameters().values():
        p.data[...] = rng.standard_normal(p.shape)
    p1 = g(Tensor(rng.standard_normal((8, 2, 2)))).data
    p2 = g(Tensor(rng.standard_normal((8, 2, 2)))).data
    assert np.abs(p1 - p2).max() > 0


def test_guider_symmetric_input_symmetric_weights():
    rng = np.random.default_rng(4)
    g = S.GuiderNet(4, 4, rng)
    g.w1.data[...] = 0.7
    g.w2.data[...] = 1.3
    g.b2.data[...] = 0.0
    ch = rng.standard_normal((2, 2))
    p = g(Tensor(np.stack([ch] * 4))).data
    np.testing.assert_allclose(p, 0.25, atol=1e-15)


def test_permutation_examples():
    p = S.permutation_from_weights(np.array([0.1, 0.4, 0.3, 0.2]))
    np.testing.assert_array_equal(p.forward, [1, 2, 3, 0])
    assert S.permutation_from_weights(np.full(6, 1 / 6)).is_identity()
    np.testing.assert_array_equal(p.forward[p.inverse], np.arange(4))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 16), elements=st.integers(0, 4)))
def test_permutation_is_sorted_stable_bijection(raw):
    q = np.exp(raw.astype(float))
    q /= q.sum()
    p = S.permutation_from_weights(q)
    assert sorted(p.forward.tolist()) == list(range(len(q)))
    assert np.all(np.diff(q[p.forward]) <= 0)
    for a, b in zip(p.forward[:-1], p.forward[1:]):
        if q[a] == q[b]:
            assert a < b
    half = len(q) // 2
    assert q[p.forward[:half]].min() >= q[p.forward[half:]].max()


def test_shuffle_apply_and_inverse():
    x = np.arange(4.0).reshape(4, 1, 1) + np.zeros((4, 2, 2))
    ident = S.Permutation.identity(4)
    np.testing.assert_array_equal(S.shuffle_apply(Tensor(x), ident).data, x)
    p = S.Permutation.from_indices([1, 2, 3, 0])
    y = S.shuffle_apply(Tensor(x), p).data
    np.testing.assert_array_equal(y[:, 0, 0], [1, 2, 3, 0])
    np.testing.assert_array_equal(S.shuffle_inverse(Tensor(y), p).data, x)
    with pytest.raises(T.ShapeError):
        S.shuffle_apply(Tensor(np.zeros((3, 1, 1))), p)


def test_scrambled_eight_channels_restored():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 3, 3))
    p = S.Permutation.from_indices(rng.permutation(8))
    np.testing.assert_array_equal(S.shuffle_inverse(S.shuffle_apply(Tensor(x), p), p).data, x)


def test_sampling_path_permutation_matches_inference_path():
    u = unit(8, seed=6)
    u.solver.w3.data[...] = np.random.default_rng(7).standard_normal(u.solver.w3.shape)
    p_inf, p_samp = u.permutation(), u.permutation()
    np.testing.assert_array_equal(p_inf.forward, p_samp.forward)
    x = np.random.default_rng(8).standard_normal((8, 2, 2))
    np.testing.assert_array_equal(S.shuffle_inverse(S.shuffle_apply(Tensor(x), p_inf), p_samp).data, x)


def test_kl_examples():
    p = Tensor([0.5, 0.5])
    assert S.kl_divergence(p, p).item() == 0.0
    val = S.kl_divergence(p, Tensor([0.25, 0.75])).item()
    assert val == pytest.approx(0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0), abs=1e-15)
    assert val == pytest.approx(0.143841036225890, abs=1e-14)
    with pytest.raises(T.ShapeError):
        S.kl_divergence(Tensor([0.5, 0.5]), Tensor([0.2, 0.3, 0.5]))


def test_kl_nonnegative_on_random_simplex_pairs():
    rng = np.random.default_rng(9)
    P = rng.dirichlet(np.ones(6), size=10_000)
    Q = rng.dirichlet(np.ones(6), size=10_000)
    direct = np.sum(P * np.log(P / Q), axis=1)
    ours = np.array([S.kl_divergence(Tensor(p), Tensor(q)).item() for p, q in zip(P[:500], Q[:500])])
    np.testing.assert_allclose(ours, direct[:500], rtol=1e-12)
    assert direct.min() > 0
    pq = S.kl_from_logits(Tensor(np.log(P)), Tensor(np.log(Q))).data
    np.testing.assert_allclose(pq, direct, rtol=1e-9, atol=1e-15)


def test_kl_gradient_wrt_solver_logits():
    rng = np.random.default_rng(10)
    p_logits = rng.standard_normal((3, 8))
    q_logits = rng.standard_normal(8)
    q = Tensor(q_logits, requires_grad=True)
    g = backward(T.sum_(S.kl_from_logits(Tensor(p_logits), q)))[q]
    num = central_diff(lambda v: float(S.kl_from_logits(Tensor(p_logits), Tensor(v)).data.sum()), q_logits)
    assert rel_err(g, num) < 1e-4


def test_zero_init_contract_in_model():
    m = MultiScaleFlow((1, 8, 8), scales=3, steps_per_scale=1, hidden_width=4)
    for k in range(2):
        su = m.scales[k].shuffle_unit
        q = su.solver_eval()
        u = Tensor(np.random.default_rng(k).standard_normal((4,) + (su.channels, 2, 2)))
        p = su.guider_eval(u)
        assert np.abs(q.data - 1 / su.channels).max() < 1e-12
        assert np.abs(S.kl_divergence(p, q).data).max() < 1e-15
        assert su.permutation().is_identity()
    assert m.scales[2].shuffle_unit is None


def test_shuffle_contributes_zero_logdet():
    rng = np.random.default_rng(11)
    m = MultiScaleFlow((1, 4, 4), scales=2, steps_per_scale=1, hidden_width=4)
    for a in m.actnorms():
        a.initialized = True
    x = Tensor(rng.standard_normal((2, 1, 4, 4)))
    _, ld0 = m.forward(x)
    m.scales[0].shuffle_unit.solver.w3.data[...] = rng.standard_normal((4, 2))
    assert not m.permutation(0).is_identity()
    latents, ld1 = m.forward(x)
    np.testing.assert_array_equal(ld0.data, ld1.data)
    # selection contract: kept half holds the largest weights
    q = m.scales[0].shuffle_unit.solver_eval().data
    perm = m.permutation(0).forward
    assert q[perm[:2]].min() >= q[perm[2:]].max()


def test_prior_mismatch_ranks_non_gaussian_channels():
    rng = np.random.default_rng(12)
    u = np.stack([rng.standard_normal((256, 4, 4)), rng.uniform(-3, 3, (256, 4, 4)),
                  0.1 * rng.standard_normal((256, 4, 4)), rng.standard_normal((256, 4, 4))], axis=1)
    gain = S.prior_mismatch(u)
    assert abs(gain[0]) < 0.02 and abs(gain[3]) < 0.02
    assert gain[1] > 0.2 and gain[2] > 1.0


def test_spacing_entropy_gaussian():
    x = np.random.default_rng(13).standard_normal(20000)
    assert S.spacing_entropy(x) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=0.03)
