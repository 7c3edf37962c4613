import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given
from hypothesis import strategies as st

from pchisd.grid import build_grid
from pchisd.pde_solvers import (
    NewtonNonconvergenceError, SolverSettings, solve_adjoint, solve_shifted, solve_shifted_batch, solve_state,
    solve_state_batch, state_residual,
)
from pchisd.problem import PRESETS, Nonlinearity, make_preset, make_problem


def test_case1_zero_control_is_one_linear_solve():
    p = make_preset("case1", 16, 0.01)
    y, info = solve_state(p, np.zeros(p.m), full_output=True)
    rhs = np.full(p.m, 2 * np.exp(-1) - 1)  # g(x, 0), about -0.26424
    ref, status = spla.cg(p.A, rhs, rtol=1e-14, atol=0.0)
    assert status == 0
    np.testing.assert_allclose(y, ref, atol=1e-12)
    assert info.iterations == 1


def test_oned_zero_control_bounds():
    p = make_preset("oned", 64, 0.02)
    y = solve_state(p, np.zeros(p.m))
    assert np.all((y > 0) & (y < 1))
    half = y[: p.m // 2 + 1]
    assert np.all(np.diff(half) > 0)
    np.testing.assert_allclose(y, y[::-1], atol=1e-14)
    assert np.linalg.norm(state_residual(p, np.zeros(p.m), y)) <= 1e-12 * np.sqrt(p.m) * 10


@pytest.mark.parametrize("name", PRESETS)
def test_warm_start_at_solution_costs_nothing(name, rng):
    p = make_preset(name, 8, 0.01)
    u = 0.5 * rng.standard_normal(p.m)
    y = solve_state(p, u)
    y2, info = solve_state(p, u, warm_start=y, full_output=True)
    assert info.iterations == 0
    np.testing.assert_array_equal(y, y2)


def test_newton_quadratic_contraction():
    p = make_preset("oned", 64, 0.02)
    u = 2.0 * np.sin(3 * np.pi * p.grid.coords[:, 0])
    _, info = solve_state(p, u, warm_start=np.full(p.m, 1.5), full_output=True)
    r = np.array(info.residuals)
    assert len(r) >= 4
    tail = r[-4:]
    assert np.all(np.diff(tail) < 0)
    # r_{k+1} <= C r_k^2 once r_k < 1e-3
    pairs = [(a, b) for a, b in zip(r[:-1], r[1:]) if a < 1e-3 and b > 1e-13]
    for a, b in pairs:
        assert b <= 10.0 * a**2


def test_newton_cap_raises():
    p = make_preset("oned", 32, 0.02)
    with pytest.raises(NewtonNonconvergenceError) as err:
        solve_state(p, np.full(p.m, 0.3), warm_start=np.full(p.m, 50.0),
                    settings=SolverSettings(newton_max_iter=2))
    assert err.value.residual > 0


def test_adjoint_zero_for_matching_state():
    p = make_preset("oned", 32, 0.02)
    np.testing.assert_array_equal(solve_adjoint(p, p.y_d), 0.0)


def test_adjoint_eigenfunction():
    errs = []
    for n in (32, 64):
        p = make_preset("oned", n, 0.02)
        x = p.grid.coords[:, 0]
        q = solve_adjoint(p, np.zeros(p.m))
        errs.append(np.abs(q - 2 * np.sin(np.pi * x) / (np.pi**2 + 1)).max())
    assert errs[1] < errs[0] / 3.5  # O(h^2)
    assert errs[1] < 1e-4


def test_adjoint_is_transpose_solve(rng):
    grid = build_grid(1, 12)
    a = lambda x: 1 + x[:, 0]  # noqa: E731
    cubic = Nonlinearity(lambda x, s: s**3, lambda x, s: 3 * s**2, lambda x, s: 6 * s, "y^3")
    p = make_problem(grid, cubic, Nonlinearity.zero(), 0.0, 0.1, a=a, c=0.0)
    y = rng.standard_normal(p.m)
    K = (p.A + sp.diags(3 * y**2)).toarray()
    np.testing.assert_allclose(solve_adjoint(p, y), np.linalg.solve(K.T, y - p.y_d), rtol=1e-12)


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_banded_matches_sparse_lu(seed, transpose):
    p = make_preset("oned", 16, 0.02)
    r = np.random.default_rng(seed)
    shift = r.uniform(0, 3, p.m)
    rhs = r.standard_normal(p.m)
    M = (p.A + sp.diags(shift)).toarray()
    ref = np.linalg.solve(M.T if transpose else M, rhs)
    np.testing.assert_allclose(solve_shifted(p, shift, rhs, transpose=transpose), ref, rtol=1e-12, atol=1e-14)


def test_cg_matches_direct(rng):
    p = make_preset("case2", 12, 0.01)
    u = rng.standard_normal(p.m)
    y_direct = solve_state(p, u, settings=SolverSettings(linear_solver="direct"))
    y_cg = solve_state(p, u, settings=SolverSettings(linear_solver="cg", cg_tol=1e-14))
    np.testing.assert_allclose(y_cg, y_direct, atol=1e-11)


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(linear_solver="qr")
    with pytest.raises(ValueError):
        SolverSettings(newton_tol=-1.0)
    assert SolverSettings().tolerance(100) == pytest.approx(1e-11)


@pytest.mark.parametrize("name,n", [("oned", 32), ("case2", 8), ("case3", 6)])
def test_batch_state_matches_columns(name, n, rng):
    p = make_preset(name, n, 0.005)
    U = rng.standard_normal((p.m, 5))
    Y = solve_state_batch(p, U)
    for j in range(5):
        np.testing.assert_allclose(Y[:, j], solve_state(p, U[:, j]), atol=1e-12)
    Yw = solve_state_batch(p, U, warm_start=Y[:, 0])
    np.testing.assert_allclose(Yw, Y, atol=1e-10)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.booleans())
def test_batch_shifted_solve(seed, b, transpose):
    p = make_preset("oned", 10, 0.02)
    r = np.random.default_rng(seed)
    shift = r.uniform(0, 2, (p.m, b))
    rhs = r.standard_normal((p.m, b))
    X = solve_shifted_batch(p, shift, rhs, transpose=transpose)
    for j in range(b):
        np.testing.assert_allclose(X[:, j], solve_shifted(p, shift[:, j], rhs[:, j], transpose=transpose),
                                   rtol=1e-12, atol=1e-14)
