import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pchisd.hisd import (
    DegenerateDirectionsError, HisdConfig, HisdNonconvergence, Metric, TangentProjection, bb_mode,
    bb_step, gram_schmidt, init_state, node_id, pchisd_step, projection_for, run_pchisd,
)
from pchisd.landscape import stationary_point
from pchisd.objective import dense_hessian, morse_index
from pchisd.problem import make_preset


def test_gram_schmidt_examples():
    Q = gram_schmidt(np.array([[1.0, 1.0], [0.0, 1.0]]))
    np.testing.assert_allclose(Q, np.eye(2), atol=1e-15)
    Q = gram_schmidt(np.array([[3.0], [4.0]]))
    np.testing.assert_allclose(Q[:, 0], [0.6, 0.8])
    with pytest.raises(DegenerateDirectionsError):
        gram_schmidt(np.array([[1.0, 2.0], [1.0, 2.0]]))


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_gram_schmidt_orthonormal_same_span(seed, k):
    V = np.random.default_rng(seed).standard_normal((12, k))
    Q = gram_schmidt(V)
    np.testing.assert_allclose(Q.T @ Q, np.eye(k), atol=1e-12)
    # V = Q (Q^T V): span preserved
    np.testing.assert_allclose(Q @ (Q.T @ V), V, atol=1e-10)


def test_bb_step_examples():
    s = np.array([1.0, 0.0])
    y = np.array([2.0, 0.0])
    z = np.zeros(2)
    assert bb_step(z, z, s, y, "BB1", (1e-6, 1.0), 0.1) == pytest.approx(0.5)
    assert bb_step(z, z, s, y, "BB2", (1e-6, 1.0), 0.1) == pytest.approx(0.5)
    # negative curvature: absolute value
    assert bb_step(z, z, s, -y, "BB1", (1e-6, 1.0), 0.1) == pytest.approx(0.5)
    # clamps
    assert bb_step(z, z, s, 1e-9 * y, "BB1", (1e-6, 1.0), 0.1) == 1.0
    assert bb_step(z, z, s, 1e9 * y, "BB2", (1e-6, 1.0), 0.1) == 1e-6
    # zero denominator keeps the previous step
    assert bb_step(z, z, s, np.array([0.0, 1.0]), "BB1", (1e-6, 1.0), 0.1) == 0.1
    with pytest.raises(ValueError):
        bb_step(z, z, s, y, "BB3", (1e-6, 1.0), 0.1)
    assert [bb_mode(i) for i in range(4)] == ["BB2", "BB1", "BB2", "BB1"]


def test_config_validation():
    with pytest.raises(ValueError):
        HisdConfig(k=-1)
    with pytest.raises(ValueError):
        HisdConfig(beta_min=2.0, beta_max=1.0)
    with pytest.raises(ValueError):
        HisdConfig(metric="l1")
    with pytest.raises(ValueError):
        HisdConfig(metric="h1", direction_update="euler")
    assert HisdConfig().with_k(3).k == 3


def test_node_id_stable():
    u = np.linspace(0, 1, 7)
    assert node_id(u, 2) == node_id(u + 1e-9, 2)
    assert node_id(u, 2) != node_id(u, 3)
    assert len(node_id(u, None)) == 12


def test_projection_properties(rng):
    p = make_preset("case3", 6, 0.002)
    P = projection_for(p)
    assert isinstance(P, TangentProjection)
    assert projection_for(make_preset("case2", 6, 0.002)) is None
    v = rng.standard_normal(p.m)
    np.testing.assert_allclose(P(P(v)), P(v), atol=1e-15)
    assert abs(P(v).sum()) < 1e-12
    B = P.basis()
    np.testing.assert_allclose(B.T @ B, np.eye(p.m - 1), atol=1e-12)
    assert np.abs(B.sum(axis=0)).max() < 1e-12


def _reflect(problem, u, V, metric="euclidean"):
    """Force direction of one step with fixed beta, recovered from the update."""
    cfg = HisdConfig(k=V.shape[1], bb=False, beta0=1e-3, metric=metric)
    s0 = init_state(problem, u, V, cfg)
    s1 = pchisd_step(problem, s0, cfg)
    return -(s1.u - u) / cfg.beta0, s0.evaluation.gradient


def test_k0_step_is_gradient_step(rng):
    p = make_preset("oned", 16, 0.02)
    u = 0.3 * rng.standard_normal(p.m)
    force, g = _reflect(p, u, np.zeros((p.m, 0)))
    np.testing.assert_allclose(force, g, rtol=1e-12)


def test_full_reflection_is_ascent(rng):
    p = make_preset("oned", 8, 0.02)
    u = 0.3 * rng.standard_normal(p.m)
    force, g = _reflect(p, u, np.eye(p.m))
    np.testing.assert_allclose(force, -g, atol=1e-12)


def test_partial_reflection(rng):
    p = make_preset("oned", 16, 0.02)
    u = 0.3 * rng.standard_normal(p.m)
    V = gram_schmidt(rng.standard_normal((p.m, 2)))
    force, g = _reflect(p, u, V)
    np.testing.assert_allclose(force, g - 2 * V @ (V.T @ g), atol=1e-12)


@pytest.mark.parametrize("metric", ["euclidean", "h1"])
@pytest.mark.parametrize("update", ["ritz", "euler"])
def test_directions_stay_orthonormal(metric, update, rng):
    if metric == "h1" and update == "euler":
        pytest.skip("combination rejected by the config")
    p = make_preset("oned", 16, 0.02)
    cfg = HisdConfig(k=3, metric=metric, direction_update=update)
    state = init_state(p, 0.2 * rng.standard_normal(p.m), gram_schmidt(rng.standard_normal((p.m, 3))), cfg)
    for _ in range(15):
        state = pchisd_step(p, state, cfg)
        np.testing.assert_allclose(state.V.T @ state.V, np.eye(3), atol=1e-10)


def test_init_state_rejects_bad_directions(rng):
    p = make_preset("oned", 8, 0.02)
    with pytest.raises(ValueError):
        init_state(p, np.zeros(p.m), np.ones((p.m, 1)), HisdConfig(k=1))
    with pytest.raises(ValueError):
        init_state(p, np.zeros(p.m), np.zeros((p.m, 0)), HisdConfig(k=1))


def test_constrained_iterates_keep_mean(rng):
    p = make_preset("case3", 8, 0.002)
    P = projection_for(p)
    cfg = HisdConfig(k=1, metric="h1")
    v = P(rng.standard_normal(p.m))
    state = init_state(p, P(0.2 * rng.standard_normal(p.m)), (v / np.linalg.norm(v))[:, None], cfg, P)
    for _ in range(20):
        state = pchisd_step(p, state, cfg, P)
        assert abs(state.u.mean()) < 1e-12
        assert abs(state.V.sum()) < 1e-10


def test_metric_basis_is_m_orthonormal(rng):
    p = make_preset("oned", 16, 0.005)
    M = Metric(p, "h1")
    V = gram_schmidt(rng.standard_normal((p.m, 3)))
    U, L = M.basis(V)
    np.testing.assert_allclose(M.gram(U, U), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(U @ (L.T), V, atol=1e-12)


def test_nonconvergence_carries_state():
    p = make_preset("oned", 16, 0.02)
    with pytest.raises(HisdNonconvergence) as err:
        run_pchisd(p, 0.3 * np.ones(p.m), None, HisdConfig(max_iter=3))
    assert err.value.state.iteration == 3


@pytest.mark.parametrize("metric", ["euclidean", "h1"])
def test_minimum_from_constant_start(metric):
    p = make_preset("oned", 32, 0.02)
    pt = run_pchisd(p, 0.4 * np.ones(p.m), None, HisdConfig(metric=metric))
    assert pt.index == 0 and pt.gradient_norm < 1e-6
    assert pt.verified and not pt.flags
    assert pt.cost == pytest.approx(0.92218792, abs=5e-3)  # N=64 value, close at N=32


def test_case1_index1_from_perturbed_seed(rng):
    p = make_preset("case1", 8, 0.01)
    parent = stationary_point(p, np.zeros(p.m), HisdConfig())
    assert parent.index == 1
    v = parent.directions
    seed = 0.1 * v[:, 0] + 0.02 * rng.standard_normal(p.m)
    pt = run_pchisd(p, seed, v, HisdConfig(k=1))
    assert pt.index == 1
    assert morse_index(dense_hessian(p, pt.u)) == 1


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sign_equivariance(seed):
    p = make_preset("oned", 16, 0.02)
    r = np.random.default_rng(seed)
    u = 0.3 * r.standard_normal(p.m)
    V = gram_schmidt(r.standard_normal((p.m, 2)))
    cfg = HisdConfig(k=2)
    a = init_state(p, u, V, cfg)
    b = init_state(p, -u, V, cfg)
    for _ in range(5):
        a = pchisd_step(p, a, cfg)
        b = pchisd_step(p, b, cfg)
    np.testing.assert_allclose(a.u, -b.u, atol=1e-9)
