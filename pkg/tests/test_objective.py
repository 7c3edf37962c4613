import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pchisd.checks import fd_gradient, relative_errors
from pchisd.grid import build_grid
from pchisd.objective import (
    HessianSizeError, cost, default_dimer_length, dense_hessian, dimer_hvp, dimer_hvp_batch, eval_gradient,
    index_bounds, morse_index,
)
from pchisd.problem import Nonlinearity, make_preset, make_problem

identity = Nonlinearity(lambda x, s: s, lambda x, s: np.ones_like(s), lambda x, s: np.zeros_like(s), "u")


def linear_problem(dim=1, n=10, lam=0.05):
    grid = build_grid(dim, n)
    return make_problem(grid, Nonlinearity.zero(), identity,
                        lambda x: np.sin(np.pi * x[:, 0]), lam)


def test_linear_hessian_oracle(rng):
    # y = A^{-1} u, so the nodal Hessian is lam R + A^{-T} A^{-1}
    p = linear_problem()
    Ainv = np.linalg.inv(p.A.toarray())
    H_ref = p.lam * p.R.toarray() + Ainv.T @ Ainv
    u = rng.standard_normal(p.m)
    np.testing.assert_allclose(dense_hessian(p, u), H_ref, atol=1e-8)


def test_linear_gradient_oracle(rng):
    p = linear_problem(dim=2, n=6)
    Ainv = np.linalg.inv(p.A.toarray())
    u = rng.standard_normal(p.m)
    ref = p.lam * p.R @ u + Ainv.T @ (Ainv @ u - p.y_d)
    np.testing.assert_allclose(eval_gradient(p, u).gradient, ref, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("name,n,lam", [("oned", 32, 0.02), ("case1", 8, 0.01), ("case2", 8, 0.002)])
def test_gradient_matches_finite_differences(name, n, lam, rng):
    p = make_preset(name, n, lam)
    u = 0.5 * rng.standard_normal(p.m)
    err = relative_errors(eval_gradient(p, u).gradient, fd_gradient(p, u))
    assert err.max() <= 1e-5


def test_cost_at_zero_oned():
    # y_d = 0 on the nodes where y(0) lives; cost is half the mesh-weighted norm of y
    p = make_preset("oned", 32, 0.02)
    ev = eval_gradient(p, np.zeros(p.m))
    assert ev.cost == pytest.approx(0.5 * p.grid.cell_volume * np.sum((ev.y - p.y_d) ** 2))
    assert ev.gradient_norm < 1e-12


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["oned", "case1"]))
def test_cost_even_gradient_odd(seed, name):
    p = make_preset(name, 16 if name == "oned" else 6, 0.02)
    u = np.random.default_rng(seed).standard_normal(p.m)
    a, b = eval_gradient(p, u), eval_gradient(p, -u)
    assert a.cost == pytest.approx(b.cost, rel=1e-10)
    np.testing.assert_allclose(a.gradient, -b.gradient, atol=1e-10)


def test_dimer_error_ratio(rng):
    p = make_preset("oned", 16, 0.02)
    u = 0.3 * rng.standard_normal(p.m)
    v = rng.standard_normal(p.m)
    v /= np.linalg.norm(v)
    ref = dense_hessian(p, u, l=1e-5) @ v
    e1 = np.linalg.norm(dimer_hvp(p, u, v, 2e-2) - ref)
    e2 = np.linalg.norm(dimer_hvp(p, u, v, 1e-2) - ref)
    assert 3.2 <= e1 / e2 <= 4.8


def test_dimer_rejects_bad_input():
    p = make_preset("oned", 8, 0.02)
    with pytest.raises(ValueError):
        dimer_hvp(p, np.zeros(p.m), np.ones(p.m))
    e = np.eye(p.m)[0]
    with pytest.raises(ValueError):
        dimer_hvp(p, np.zeros(p.m), e, l=0.0)


def test_default_dimer_length():
    assert default_dimer_length(np.array([0.2, -0.5])) == 1e-4
    assert default_dimer_length(np.array([0.2, -3.0])) == pytest.approx(3e-4)


def test_dense_hessian_symmetric_and_capped(rng):
    p = make_preset("case2", 6, 0.002)
    H, asym = dense_hessian(p, 0.2 * rng.standard_normal(p.m), full_output=True)
    assert np.array_equal(H, H.T)
    assert asym < 1e-5
    with pytest.raises(HessianSizeError):
        dense_hessian(p, np.zeros(p.m), cap=10)


def test_morse_index_examples():
    assert morse_index(np.diag([-2.0, -1.0, 3.0])) == 2
    assert morse_index(np.diag([1.0, 2.0])) == 0
    assert morse_index(np.diag([-1e-12, 1.0])) == 0
    assert index_bounds(np.array([-1.0, 1e-12, 2.0])) == (1, 2)
    assert index_bounds(np.array([-1e3, -1e-6, 5.0])) == (1, 2)  # tau scales with the spectrum


def test_parent_index_oned_n64():
    p = make_preset("oned", 64, 0.02)
    assert morse_index(dense_hessian(p, np.zeros(p.m))) == 4


def test_cost_helper_matches_evaluation(rng):
    p = make_preset("case3", 6, 0.002)
    u = rng.standard_normal(p.m)
    assert cost(p, u) == pytest.approx(eval_gradient(p, u).cost, rel=1e-14)


@pytest.mark.parametrize("name,n", [("oned", 32), ("case1", 6)])
def test_batched_dimers_match_single(name, n, rng):
    p = make_preset(name, n, 0.01)
    u = 0.3 * rng.standard_normal(p.m)
    V = np.linalg.qr(rng.standard_normal((p.m, 3)))[0]
    HV = dimer_hvp_batch(p, u, V)
    for j in range(3):
        np.testing.assert_allclose(HV[:, j], dimer_hvp(p, u, V[:, j]), rtol=1e-9, atol=1e-9)
    with pytest.raises(ValueError):
        dimer_hvp_batch(p, u, 2 * V)
