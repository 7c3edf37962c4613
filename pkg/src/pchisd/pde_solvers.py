"""Discrete state (semilinear, Newton) and adjoint (linear) solvers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .problem import Problem, sample_nonlinearity

DIRECT_SIZE_LIMIT = 100_000


class SolverError(RuntimeError):
    pass


class NewtonNonconvergenceError(SolverError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances for the auxiliary solves.

    ``newton_tol=None`` means ``1e-12 * sqrt(m)``.  At fine meshes the residual
    of the stiffness matrix bottoms out at roundoff above that level, so Newton
    also stops once a correction is below ``step_tol`` relative to ``|y|_inf``.
    """

    newton_tol: Optional[float] = None
    newton_max_iter: int = 50
    step_tol: float = 1e-13
    linear_solver: str = "auto"  # auto | direct | cg
    cg_tol: float = 1e-12
    cg_max_iter: Optional[int] = None
    max_halvings: int = 20

    def __post_init__(self):
        if self.newton_tol is not None and self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iter < 1 or self.max_halvings < 0:
            raise ValueError("iteration caps must be >= 1")
        if self.step_tol <= 0 or self.cg_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.linear_solver not in ("auto", "direct", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")

    def tolerance(self, m: int) -> float:
        return self.newton_tol if self.newton_tol is not None else 1e-12 * np.sqrt(m)

    def method(self, m: int) -> str:
        if self.linear_solver != "auto":
            return self.linear_solver
        return "direct" if m <= DIRECT_SIZE_LIMIT else "cg"


DEFAULT_SETTINGS = SolverSettings()


@dataclass
class NewtonInfo:
    iterations: int
    residual: float
    residuals: list
    converged: bool


def linear_solve(M: sp.spmatrix, rhs: np.ndarray, settings: SolverSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Solve ``M x = rhs`` with a sparse LU or conjugate gradients."""
    m = rhs.shape[0]
    if settings.method(m) == "cg":
        x, status = spla.cg(M, rhs, rtol=settings.cg_tol, atol=0.0, maxiter=settings.cg_max_iter or 10 * m)
        if status != 0:
            raise SolverError(f"conjugate gradient did not converge (status {status})")
        return x
    try:
        x = spla.splu(sp.csc_matrix(M)).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"singular linear system: {exc}") from exc
    return _checked(x)


def _checked(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values")
    return x


def solve_shifted(
    problem: Problem,
    shift: Optional[np.ndarray],
    rhs: np.ndarray,
    settings: SolverSettings = DEFAULT_SETTINGS,
    transpose: bool = False,
) -> np.ndarray:
    """Solve ``(A + diag(shift)) x = rhs`` (or its transpose).

    ``shift=None`` means zero and reuses the cached factorisation of ``A``.
    1D operators are tridiagonal and go through LAPACK's banded solver.
    """
    A = problem.A
    if settings.method(problem.m) == "cg":
        M = A.T if transpose else A
        if shift is not None:
            M = M + sp.diags(shift)
        return linear_solve(M.tocsr(), rhs, settings)

    if problem.grid.dim == 1:
        ab = problem.A_banded.copy()
        if transpose:
            ab[0, 1:], ab[2, :-1] = problem.A_banded[2, :-1], problem.A_banded[0, 1:]
        if shift is not None:
            ab[1] += shift
        try:
            with np.errstate(all="raise"):
                x = sla.solve_banded((1, 1), ab, rhs, check_finite=False)
        except (sla.LinAlgError, FloatingPointError) as exc:
            raise SolverError(f"singular tridiagonal system: {exc}") from exc
        return _checked(x)

    trans = "T" if transpose else "N"
    if shift is None:
        return _checked(problem.A_factor.solve(rhs, trans=trans))
    data = A.data.copy()
    data[problem.A_diagonal_slots] += shift
    M = sp.csr_matrix((data, A.indices, A.indptr), shape=A.shape)
    try:
        lu = spla.splu(M.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"singular Jacobian: {exc}") from exc
    return _checked(lu.solve(rhs, trans=trans))


def solve_regularizer(problem: Problem, rhs: np.ndarray) -> np.ndarray:
    """Solve ``R z = rhs`` with the discrete ``-Laplace + I`` (used as a preconditioner)."""
    if problem.R is problem.A:
        return solve_shifted(problem, None, rhs)
    return problem.R_factor.solve(rhs)


def state_residual(problem: Problem, u: np.ndarray, y: np.ndarray) -> np.ndarray:
    grid = problem.grid
    return problem.A @ y + sample_nonlinearity(problem.d, grid, y) - sample_nonlinearity(problem.g, grid, u)


def solve_state(
    problem: Problem,
    u: np.ndarray,
    warm_start: Optional[np.ndarray] = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
    full_output: bool = False,
):
    """Newton's method for ``A y + d(y) = g(u)``.

    Without a warm start the iteration begins from the solution of
    ``A y = g(u) - d(0)``.  A halving line search kicks in only when a full
    step increases the residual.  With ``full_output`` returns ``(y, info)``.
    """
    grid = problem.grid
    tol = settings.tolerance(problem.m)
    gu = sample_nonlinearity(problem.g, grid, u)
    linear = problem.d.is_zero

    solves = 0
    if warm_start is None:
        rhs = gu - sample_nonlinearity(problem.d, grid, np.zeros(problem.m))
        y = solve_shifted(problem, None, rhs, settings)
        solves = 1
    else:
        y = np.array(warm_start, dtype=float, copy=True)

    F = problem.A @ y + sample_nonlinearity(problem.d, grid, y) - gu
    res = float(np.linalg.norm(F))
    history = [res]
    converged = res <= tol or (linear and solves == 1)
    while not converged:
        if solves >= settings.newton_max_iter:
            raise NewtonNonconvergenceError(
                f"Newton stalled after {solves} iterations, residual {res:.3e} > {tol:.3e}", res
            )
        shift = None if linear else sample_nonlinearity(problem.d, grid, y, 1)
        delta = -solve_shifted(problem, shift, F, settings)
        solves += 1

        t = 1.0
        for _ in range(settings.max_halvings + 1):
            y_new = y + t * delta
            F_new = problem.A @ y_new + sample_nonlinearity(problem.d, grid, y_new) - gu
            res_new = float(np.linalg.norm(F_new))
            if res_new <= res or t * np.abs(delta).max() <= settings.step_tol * max(1.0, np.abs(y).max()):
                break
            t *= 0.5
        small_step = t * np.abs(delta).max() <= settings.step_tol * max(1.0, np.abs(y_new).max())
        y, F, res = y_new, F_new, res_new
        history.append(res)
        converged = res <= tol or small_step or linear

    info = NewtonInfo(iterations=solves, residual=res, residuals=history, converged=True)
    return (y, info) if full_output else y


def adjoint_matrix(problem: Problem, y: np.ndarray) -> sp.csr_matrix:
    """``[A + diag(d_y(y))]^T``."""
    dy = sample_nonlinearity(problem.d, problem.grid, y, 1)
    return (problem.A + sp.diags(dy)).T.tocsr()


def solve_adjoint(problem: Problem, y: np.ndarray, settings: SolverSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Solve ``[A + diag(d_y(y))]^T p = y - y_d``."""
    shift = None if problem.d.is_zero else sample_nonlinearity(problem.d, problem.grid, y, 1)
    return solve_shifted(problem, shift, y - problem.y_d, settings, transpose=True)


# --- batched variants --------------------------------------------------------
# Columns are independent fields.  In 1D the tridiagonal blocks are stacked
# into one banded system so a batch costs a single LAPACK call; elsewhere the
# columns are solved one after another.

def solve_shifted_batch(
    problem: Problem,
    shift: Optional[np.ndarray],
    rhs: np.ndarray,
    settings: SolverSettings = DEFAULT_SETTINGS,
    transpose: bool = False,
) -> np.ndarray:
    """Column-wise :func:`solve_shifted` for ``m x b`` arrays."""
    m, b = rhs.shape
    if b == 0:
        return rhs.copy()
    if problem.grid.dim != 1 or settings.method(m) == "cg":
        cols = [solve_shifted(problem, None if shift is None else shift[:, j], rhs[:, j], settings, transpose)
                for j in range(b)]
        return np.column_stack(cols)
    base = problem.A_banded
    if transpose:
        base = base.copy()
        base[0, 1:], base[2, :-1] = problem.A_banded[2, :-1], problem.A_banded[0, 1:]
    ab = np.tile(base, (1, b))
    ab[0, m::m] = 0.0  # decouple neighbouring blocks
    ab[2, m - 1:-1:m] = 0.0
    if shift is not None:
        ab[1] += shift.ravel(order="F")
    try:
        with np.errstate(all="raise"):
            x = sla.solve_banded((1, 1), ab, rhs.ravel(order="F"), check_finite=False)
    except (sla.LinAlgError, FloatingPointError) as exc:
        raise SolverError(f"singular tridiagonal system: {exc}") from exc
    return _checked(x).reshape((m, b), order="F")


def solve_state_batch(
    problem: Problem,
    U: np.ndarray,
    warm_start: Optional[np.ndarray] = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Newton solves for every column of ``U`` at once.

    Same stopping rules as :func:`solve_state`, applied per column; converged
    columns are frozen.  ``warm_start`` is one field shared by all columns or
    an ``m x b`` array.
    """
    grid = problem.grid
    m, b = U.shape
    tol = settings.tolerance(m)
    gu = sample_nonlinearity(problem.g, grid, U)
    linear = problem.d.is_zero
    if warm_start is None:
        rhs = gu - sample_nonlinearity(problem.d, grid, np.zeros(m))[:, None]
        Y = solve_shifted_batch(problem, None, rhs, settings)
        if linear:
            return Y
        solves = 1
    else:
        ws = np.asarray(warm_start, dtype=float)
        Y = np.array(np.broadcast_to(ws[:, None] if ws.ndim == 1 else ws, (m, b)))
        solves = 0

    def residual(Yc, cols):
        F = problem.A @ Yc + sample_nonlinearity(problem.d, grid, Yc) - gu[:, cols]
        return F, np.linalg.norm(F, axis=0)

    active = np.arange(b)
    F, res = residual(Y, active)
    keep = res > tol
    active, F, res = active[keep], F[:, keep], res[keep]
    while active.size:
        if solves >= settings.newton_max_iter:
            worst = float(res.max())
            raise NewtonNonconvergenceError(
                f"Newton stalled after {solves} iterations, residual {worst:.3e} > {tol:.3e}", worst
            )
        Ya = Y[:, active]
        shift = None if linear else sample_nonlinearity(problem.d, grid, Ya, 1)
        delta = -solve_shifted_batch(problem, shift, F, settings)
        solves += 1
        scale = np.maximum(1.0, np.abs(Ya).max(axis=0))
        dmax = np.abs(delta).max(axis=0)
        t = np.ones(active.size)
        Yn = Ya + delta
        Fn, rn = residual(Yn, active)
        for _ in range(settings.max_halvings):
            redo = (rn > res) & (t * dmax > settings.step_tol * scale)
            if not redo.any():
                break
            t[redo] *= 0.5
            Yn[:, redo] = Ya[:, redo] + t[redo] * delta[:, redo]
            Fn[:, redo], rn[redo] = residual(Yn[:, redo], active[redo])
        Y[:, active] = Yn
        small = t * dmax <= settings.step_tol * np.maximum(1.0, np.abs(Yn).max(axis=0))
        keep = ~((rn <= tol) | small | linear)
        active, F, res = active[keep], Fn[:, keep], rn[keep]
    return Y


def solve_adjoint_batch(problem: Problem, Y: np.ndarray, settings: SolverSettings = DEFAULT_SETTINGS) -> np.ndarray:
    shift = None if problem.d.is_zero else sample_nonlinearity(problem.d, problem.grid, Y, 1)
    return solve_shifted_batch(problem, shift, Y - problem.y_d[:, None], settings, transpose=True)
