"""Reduced cost, adjoint gradient, dimer Hessian products and Morse indices.

Two norms are in play.  Direction vectors use the plain Euclidean dot
product.  Costs and reported gradient norms use the mesh-weighted norm
``sqrt(h^n * sum(v**2))``.  The gradient itself is the unweighted nodal
expression ``lam * R u + p * g_u(u)``, i.e. ``h^-n`` times the Euclidean
gradient of the discrete cost.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pde_solvers import (
    DEFAULT_SETTINGS, SolverSettings, solve_adjoint, solve_adjoint_batch, solve_state, solve_state_batch,
)
from .problem import Problem, sample_nonlinearity

HESSIAN_SIZE_CAP = 20_000
HESSIAN_BATCH = 32  # columns per batched dimer call


class HessianSizeError(ValueError):
    pass


@dataclass
class Evaluation:
    u: np.ndarray
    y: np.ndarray
    p: np.ndarray
    cost: float
    gradient: np.ndarray
    gradient_norm: float
    newton_iterations: int = 0


def eval_cost(problem: Problem, u: np.ndarray, y: np.ndarray) -> float:
    """``1/2 |y - y_d|^2_{L2,h} + lam/2 |u|^2_{H1,h}``."""
    w = problem.grid.cell_volume
    r = y - problem.y_d
    return float(0.5 * w * np.dot(r, r) + 0.5 * problem.lam * w * np.dot(u, problem.R @ u))


def cost(problem: Problem, u: np.ndarray, settings: SolverSettings = DEFAULT_SETTINGS) -> float:
    """Reduced cost, solving the state equation first."""
    return eval_cost(problem, u, solve_state(problem, u, settings=settings))


def eval_gradient(
    problem: Problem,
    u: np.ndarray,
    settings: SolverSettings = DEFAULT_SETTINGS,
    warm_start: Optional[np.ndarray] = None,
) -> Evaluation:
    u = np.asarray(u, dtype=float)
    y, info = solve_state(problem, u, warm_start=warm_start, settings=settings, full_output=True)
    p = solve_adjoint(problem, y, settings)
    gu = sample_nonlinearity(problem.g, problem.grid, u, 1)
    grad = problem.lam * (problem.R @ u) + p * gu
    return Evaluation(
        u=u, y=y, p=p,
        cost=eval_cost(problem, u, y),
        gradient=grad,
        gradient_norm=problem.grid.norm(grad),
        newton_iterations=info.iterations,
    )


def default_dimer_length(u: np.ndarray) -> float:
    return 1e-4 * max(1.0, float(np.abs(u).max(initial=0.0)))


def dimer_hvp(
    problem: Problem,
    u: np.ndarray,
    v: np.ndarray,
    l: Optional[float] = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
    warm_start: Optional[np.ndarray] = None,
    unit_tol: float = 1e-8,
) -> np.ndarray:
    """Central-difference Hessian-vector product along a unit vector ``v``."""
    if l is None:
        l = default_dimer_length(u)
    if l <= 0:
        raise ValueError("dimer length must be positive")
    if abs(np.linalg.norm(v) - 1.0) > unit_tol:
        raise ValueError("dimer direction must have unit Euclidean norm")
    plus = eval_gradient(problem, u + l * v, settings, warm_start)
    minus = eval_gradient(problem, u - l * v, settings, warm_start)
    return (plus.gradient - minus.gradient) / (2 * l)


def gradient_batch(problem: Problem, U: np.ndarray, settings: SolverSettings = DEFAULT_SETTINGS,
                   warm_start: Optional[np.ndarray] = None) -> np.ndarray:
    """Nodal gradients at every column of ``U`` (``m x b``)."""
    Y = solve_state_batch(problem, U, warm_start, settings)
    P = solve_adjoint_batch(problem, Y, settings)
    return problem.lam * (problem.R @ U) + P * sample_nonlinearity(problem.g, problem.grid, U, 1)


def dimer_hvp_batch(
    problem: Problem,
    u: np.ndarray,
    V: np.ndarray,
    l: Optional[float] = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
    warm_start: Optional[np.ndarray] = None,
    unit_tol: float = 1e-8,
) -> np.ndarray:
    """:func:`dimer_hvp` for every column of ``V``, evaluated as one batch."""
    if l is None:
        l = default_dimer_length(u)
    if l <= 0:
        raise ValueError("dimer length must be positive")
    if V.shape[1] == 0:
        return np.zeros_like(V)
    if np.abs(np.linalg.norm(V, axis=0) - 1.0).max() > unit_tol:
        raise ValueError("dimer directions must have unit Euclidean norm")
    G = gradient_batch(problem, np.hstack([u[:, None] + l * V, u[:, None] - l * V]), settings, warm_start)
    k = V.shape[1]
    return (G[:, :k] - G[:, k:]) / (2 * l)


def dense_hessian(
    problem: Problem,
    u: np.ndarray,
    l: Optional[float] = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
    workers: int = 1,
    cap: int = HESSIAN_SIZE_CAP,
    full_output: bool = False,
):
    """Finite-difference Hessian assembled column by column from dimers.

    Returns the symmetrised matrix; with ``full_output`` also the largest
    entrywise asymmetry seen before symmetrisation.
    """
    m = problem.m
    if m > cap:
        raise HessianSizeError(f"dense Hessian of size {m} exceeds the cap {cap}")
    u = np.asarray(u, dtype=float)
    y0 = solve_state(problem, u, settings=settings)
    chunks = [np.arange(m)[i:i + HESSIAN_BATCH] for i in range(0, m, HESSIAN_BATCH)]

    def block(idx):
        E = np.zeros((m, idx.size))
        E[idx, np.arange(idx.size)] = 1.0
        return dimer_hvp_batch(problem, u, E, l, settings, warm_start=y0)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(block, chunks))
    else:
        blocks = [block(idx) for idx in chunks]
    H = np.hstack(blocks)
    asym = float(np.abs(H - H.T).max())
    H = 0.5 * (H + H.T)
    return (H, asym) if full_output else H


def default_tau(eigenvalues: np.ndarray) -> float:
    return 1e-8 * max(1.0, float(np.abs(eigenvalues).max(initial=0.0)))


def index_bounds(eigenvalues: np.ndarray, tau: Optional[float] = None) -> tuple[int, int]:
    """``(#eig < -tau, #eig < +tau)``; unequal bounds flag a degenerate point."""
    if tau is None:
        tau = default_tau(eigenvalues)
    return int(np.sum(eigenvalues < -tau)), int(np.sum(eigenvalues < tau))


def morse_index(H: np.ndarray, tau: Optional[float] = None) -> int:
    """Number of eigenvalues below ``-tau`` of a symmetric matrix."""
    try:
        eigenvalues = np.linalg.eigvalsh(H)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"eigensolver failed: {exc}") from exc
    return index_bounds(eigenvalues, tau)[0]


def hessian_spectrum(problem: Problem, u: np.ndarray, l: Optional[float] = None,
                     settings: SolverSettings = DEFAULT_SETTINGS, workers: int = 1):
    """Ascending eigenpairs of the finite-difference Hessian at ``u``."""
    H = dense_hessian(problem, u, l, settings, workers=workers)
    return np.linalg.eigh(H)
