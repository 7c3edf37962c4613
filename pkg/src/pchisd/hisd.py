"""PDE-constrained high-index saddle dynamics.

Position update (descent form)::

    u <- u - beta * M^-1 (g - 2 M U U^T g),   U^T M U = I

with ``M = I`` for the euclidean metric and ``M = lam R + shift I`` for
``metric="h1"``.  ``beta`` is a Barzilai-Borwein step on the reflected force.
The directions follow either a Rayleigh-Ritz step on
``span{U, R^-1 (H U - M U U^T H U)}`` (default) or the explicit scheme::

    v_i <- v_i - gamma * H v_i,   then Gram-Schmidt

``g`` is the adjoint gradient and ``H v`` a central dimer product.  With an
integral constraint both are first projected onto the zero-mean tangent space.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid
from .objective import (
    HESSIAN_SIZE_CAP,
    Evaluation,
    default_dimer_length,
    default_tau,
    dense_hessian,
    dimer_hvp_batch,
    eval_gradient,
    index_bounds,
)
from .pde_solvers import DEFAULT_SETTINGS, SolverSettings, solve_regularizer
from .problem import Problem


class DegenerateDirectionsError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


class HisdNonconvergence(RuntimeError):
    """Raised when ``max_iter`` is exhausted; carries the final state."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class HisdConfig:
    k: int = 0
    beta0: float = 1e-2
    gamma0: float = 1e-2
    beta_min: float = 1e-6
    beta_max: float = 1.0
    gamma_min: float = 1e-6
    gamma_max: float = 1.0
    dimer_length: Optional[float] = None  # None -> 1e-4 * max(1, |u|_inf)
    eps: float = 1e-6
    max_iter: int = 20_000
    bb: bool = True  # alternate BB1/BB2; False keeps beta0/gamma0 fixed
    settings: SolverSettings = DEFAULT_SETTINGS
    verify_index: bool = True
    hessian_cap: int = HESSIAN_SIZE_CAP
    # cap on |u_new - u|_inf (None: uncapped); damps BB excursions
    max_step: Optional[float] = None
    # abort with DivergenceError once |u|_inf exceeds this (None: never)
    max_norm: Optional[float] = None
    # "euclidean": plain dot product; "h1": <a, (lam R + metric_shift I) b>
    metric: str = "euclidean"
    metric_shift: float = 1.0
    # "ritz":  Rayleigh-Ritz on span{V, R^-1 (HV - M V V^T HV)}  (no gamma)
    # "euler": v <- v - gamma H v  (euclidean metric only)
    direction_update: str = "ritz"

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if not (0 < self.beta_min <= self.beta_max) or not (0 < self.gamma_min <= self.gamma_max):
            raise ValueError("step-size clamps must satisfy 0 < min <= max")
        if self.max_step is not None and self.max_step <= 0:
            raise ValueError("max_step must be positive")
        if self.max_norm is not None and self.max_norm <= 0:
            raise ValueError("max_norm must be positive")
        if self.eps <= 0 or self.max_iter < 1:
            raise ValueError("eps must be positive and max_iter >= 1")
        if self.direction_update not in ("ritz", "euler"):
            raise ValueError(f"unknown direction update {self.direction_update!r}")
        if self.metric not in ("h1", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.direction_update == "euler" and self.metric != "euclidean":
            raise ValueError("the euler direction update needs metric='euclidean'")

    def with_k(self, k: int) -> "HisdConfig":
        return replace(self, k=k)


@dataclass
class HisdState:
    u: np.ndarray
    V: np.ndarray
    evaluation: Evaluation
    iteration: int = 0
    beta: float = 0.0
    gamma: float = 0.0
    prev_u: Optional[np.ndarray] = None
    prev_force: Optional[np.ndarray] = None
    prev_V: Optional[np.ndarray] = None
    prev_dir_force: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)

    @property
    def gradient_norm(self) -> float:
        return self.evaluation.gradient_norm


@dataclass
class SaddlePoint:
    """A converged stationary control."""

    u: np.ndarray
    index: Optional[int]
    cost: float
    gradient_norm: float
    directions: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    index_bounds: tuple = (0, 0)
    verified: bool = False
    target_index: Optional[int] = None
    y: Optional[np.ndarray] = None
    iterations: int = 0
    provenance: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return self.index_bounds[0] != self.index_bounds[1]

    @property
    def id(self) -> str:
        return node_id(self.u, self.index)


def node_id(u: np.ndarray, index: Optional[int], resolution: float = 1e-6) -> str:
    """Deterministic hash of ``u`` rounded to ``resolution`` plus its index."""
    q = np.rint(np.asarray(u) / resolution).astype(np.int64)
    h = hashlib.sha1(q.tobytes())
    h.update(str(index).encode())
    return h.hexdigest()[:12]


# --- building blocks -------------------------------------------------------

def gram_schmidt(V: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Modified Gram-Schmidt (with one reorthogonalisation sweep) on columns."""
    V = np.array(V, dtype=float, copy=True)
    if V.ndim != 2:
        raise ValueError("expected an m x k matrix")
    Q = np.empty_like(V)
    for i in range(V.shape[1]):
        q = V[:, i]
        scale = max(1.0, np.linalg.norm(q))
        for _ in range(2):
            for j in range(i):
                q = q - np.dot(Q[:, j], q) * Q[:, j]
        nrm = np.linalg.norm(q)
        if nrm < tol * scale:
            raise DegenerateDirectionsError(f"direction {i} is numerically dependent on the previous ones")
        Q[:, i] = q / nrm
    return Q


def bb_step(prev_u, prev_g, cur_u, cur_g, mode: str, clamp: tuple, previous: float) -> float:
    """Barzilai-Borwein step length, absolute value, clamped to ``clamp``.

    ``mode`` is ``"BB1"`` (``<s,s>/<s,y>``) or ``"BB2"`` (``<s,y>/<y,y>``).
    Falls back to ``previous`` when the denominator vanishes.
    """
    s = np.ravel(cur_u) - np.ravel(prev_u)
    y = np.ravel(cur_g) - np.ravel(prev_g)
    sy = float(np.dot(s, y))
    if mode == "BB1":
        num, den = float(np.dot(s, s)), sy
    elif mode == "BB2":
        num, den = sy, float(np.dot(y, y))
    else:
        raise ValueError(f"unknown BB mode {mode!r}")
    if abs(den) <= 1e-30:
        return previous
    lo, hi = clamp
    return float(min(max(abs(num / den), lo), hi))


def bb_mode(iteration: int) -> str:
    return "BB1" if iteration % 2 == 1 else "BB2"


class TangentProjection:
    """Orthogonal projection ``v -> v - mean(v)`` onto zero-mean vectors."""

    def __init__(self, grid: Grid):
        self.grid = grid

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return v - v.mean(axis=0)

    def constraint_value(self, u: np.ndarray) -> float:
        """Mean of ``u``: the discrete integral over the unit domain."""
        return float(np.mean(u))

    def basis(self) -> np.ndarray:
        """Orthonormal basis (m x m-1) of the tangent space."""
        return sla.null_space(np.ones((1, self.grid.m)))


def tangent_projection(grid: Grid) -> TangentProjection:
    return TangentProjection(grid)


def projection_for(problem: Problem) -> Optional[TangentProjection]:
    return TangentProjection(problem.grid) if problem.constraint is not None else None


# --- dynamics --------------------------------------------------------------

def _record(state: HisdState) -> None:
    state.trace.append(
        (state.iteration, state.evaluation.cost, state.gradient_norm, state.beta, state.gamma)
    )


def init_state(problem: Problem, u0: np.ndarray, V0: np.ndarray, config: HisdConfig,
               projection: Optional[TangentProjection] = None, warm_start=None) -> HisdState:
    u0 = np.array(u0, dtype=float, copy=True)
    V0 = np.asarray(V0, dtype=float).reshape(problem.m, -1)
    if V0.shape[1] != config.k:
        raise ValueError(f"expected {config.k} initial directions, got {V0.shape[1]}")
    if V0.shape[1] and np.abs(V0.T @ V0 - np.eye(V0.shape[1])).max() > 1e-10:
        raise ValueError("initial directions must be orthonormal")
    if projection is not None:
        if V0.shape[1] and np.abs(projection(V0) - V0).max() > 1e-10:
            raise ValueError("initial directions must lie in the tangent space")
        target = problem.constraint.value
        if abs(projection.constraint_value(u0) - target) > 1e-10:
            raise ValueError("initial control violates the integral constraint")
    ev = _evaluate(problem, u0, config, projection, warm_start)
    state = HisdState(u=u0, V=V0.copy(), evaluation=ev, beta=config.beta0, gamma=config.gamma0)
    _record(state)
    return state


def _evaluate(problem, u, config, projection, warm_start) -> Evaluation:
    ev = eval_gradient(problem, u, config.settings, warm_start)
    if projection is not None:
        ev.gradient = projection(ev.gradient)
        ev.gradient_norm = problem.grid.norm(ev.gradient)
    if not (np.all(np.isfinite(ev.gradient)) and np.isfinite(ev.cost)):
        raise DivergenceError("non-finite gradient")
    return ev


class Metric:
    """Inner product ``<a, b>_M = a^T M b`` used by the dynamics.

    ``"euclidean"`` is ``M = I``.  ``"h1"`` is ``M = lam R + shift I``: the
    reduced Hessian is ``lam R`` plus a bounded part, so ``M^-1 H`` has a
    spectrum that no longer grows like ``h^-2``.  With a constraint,
    :meth:`precondition` returns the ``M``-gradient inside the tangent space.
    """

    def __init__(self, problem: Problem, kind: str = "euclidean",
                 projection: Optional[TangentProjection] = None, shift: float = 1.0):
        if kind not in ("h1", "euclidean"):
            raise ValueError(f"unknown metric {kind!r}")
        self.problem = problem
        self.kind = kind
        self.projection = projection
        self._lu = None
        if kind == "h1":
            self.M = (problem.lam * problem.R + shift * sp.identity(problem.m)).tocsc()
            self._lu = spla.splu(self.M)
        self._q = self._qs = None
        if projection is not None:
            q = solve_regularizer(problem, np.ones(problem.m))
            self._q = q / q.sum()
            if self._lu is not None:
                q = self._lu.solve(np.ones(problem.m))
                self._qs = q / q.sum()

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.M @ x if self.kind == "h1" else x

    def gram(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a.T @ self.apply(b)

    @staticmethod
    def _correct(z, q):
        if q is None:
            return z
        return z - np.outer(q, z.sum(axis=0)).reshape(z.shape)

    def smooth(self, x: np.ndarray) -> np.ndarray:
        """``R^-1 x``, corrected back into the tangent space when constrained."""
        return self._correct(solve_regularizer(self.problem, x), self._q)

    def precondition(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "euclidean":
            return self.projection(x) if self.projection is not None else x
        return self._correct(self._lu.solve(x), self._qs)

    def basis(self, V: np.ndarray):
        """``M``-orthonormal basis ``U = V L^-T`` of span(V), with ``V^T M V = L L^T``."""
        if self.kind == "euclidean" or V.shape[1] == 0:
            return V, None
        L = np.linalg.cholesky(self.gram(V, V))
        return sla.solve_triangular(L, V.T, lower=True).T, L


def _ritz_update(problem, u, U, HU, l, config, metric, y):
    """Lowest ``k`` Ritz vectors of the dimer Hessian on ``span{U, R^-1 res}`` (``M``-orthonormal)."""
    k = U.shape[1]
    res = HU - metric.apply(U) @ (U.T @ HU)
    W = metric.smooth(res)
    extra = []
    for j in range(k):
        w = W[:, j]
        scale = np.sqrt(max(float(metric.gram(w, w)), 0.0))
        if scale == 0.0:
            continue
        for _ in range(2):
            w = w - U @ metric.gram(U, w)
            for e in extra:
                w = w - e * float(metric.gram(e, w))
        nrm = np.sqrt(max(float(metric.gram(w, w)), 0.0))
        if nrm > 1e-8 * scale:
            extra.append(w / nrm)
    if not extra:
        return U.copy()
    E = np.column_stack(extra)
    nrm = np.linalg.norm(E, axis=0)
    HE = nrm * dimer_hvp_batch(problem, u, E / nrm, l, config.settings, warm_start=y)
    if metric.projection is not None:
        HE = metric.projection(HE)
    S = np.hstack([U, E])
    G = S.T @ np.hstack([HU, HE])
    w, C = np.linalg.eigh(0.5 * (G + G.T))
    return S @ C[:, :k]


def pchisd_step(problem: Problem, state: HisdState, config: HisdConfig,
                projection: Optional[TangentProjection] = None, metric: Optional[Metric] = None) -> HisdState:
    """One explicit step of the coupled position/direction dynamics."""
    if metric is None:
        metric = Metric(problem, config.metric, projection, config.metric_shift)
    u, V, g = state.u, state.V, state.evaluation.gradient
    n = state.iteration
    k = V.shape[1]

    l = config.dimer_length if config.dimer_length is not None else default_dimer_length(u)
    HV = dimer_hvp_batch(problem, u, V, l, config.settings, warm_start=state.evaluation.y)
    if projection is not None:
        HV = projection(HV)
    U, L = metric.basis(V)
    HU = HV if L is None else sla.solve_triangular(L, HV.T, lower=True).T

    force = metric.precondition(g)
    if k:
        force = force - 2.0 * U @ (U.T @ g)

    beta, gamma = state.beta, state.gamma
    if config.bb and state.prev_u is not None:
        beta = bb_step(state.prev_u, state.prev_force, u, force, bb_mode(n),
                       (config.beta_min, config.beta_max), beta)

    dir_force = None
    if k and config.direction_update == "ritz":
        V_new = gram_schmidt(_ritz_update(problem, u, U, HU, l, config, metric, state.evaluation.y))
    elif k:
        # Rayleigh-quotient residuals of the plain HiSD direction field
        dir_force = np.empty_like(V)
        for i in range(k):
            r = HV[:, i] - V[:, i] * np.dot(V[:, i], HV[:, i])
            if i:
                r = r - 2.0 * V[:, :i] @ (V[:, :i].T @ HV[:, i])
            dir_force[:, i] = r
        if config.bb and state.prev_V is not None:
            gamma = bb_step(state.prev_V, state.prev_dir_force, V, dir_force, bb_mode(n),
                            (config.gamma_min, config.gamma_max), gamma)
        V_new = gram_schmidt(V - gamma * HV)
    else:
        V_new = V.copy()

    step = -beta * force
    if projection is not None:
        step = projection(step)
    if config.max_step is not None:
        big = float(np.abs(step).max(initial=0.0))
        if big > config.max_step:
            step *= config.max_step / big
    u_new = u + step

    if not np.all(np.isfinite(u_new)):
        raise DivergenceError(f"non-finite iterate at step {n + 1}")
    if config.max_norm is not None and np.abs(u_new).max() > config.max_norm:
        raise DivergenceError(f"|u|_inf exceeded {config.max_norm:g} at step {n + 1}")
    ev = _evaluate(problem, u_new, config, projection, state.evaluation.y)
    new = HisdState(
        u=u_new, V=V_new, evaluation=ev, iteration=n + 1, beta=beta, gamma=gamma,
        prev_u=u, prev_force=force, prev_V=V if k else None, prev_dir_force=dir_force,
        trace=state.trace,
    )
    _record(new)
    return new


def verify_point(problem: Problem, u: np.ndarray, config: HisdConfig,
                 projection: Optional[TangentProjection] = None, workers: int = 1):
    """Eigen-decomposition of the (tangent-restricted) FD Hessian at ``u``.

    Returns ``(eigenvalues, eigenvectors)`` in ascending order, with
    eigenvectors expressed in the full control space.
    """
    H = dense_hessian(problem, u, config.dimer_length, config.settings, workers=workers,
                      cap=config.hessian_cap)
    if projection is None:
        return np.linalg.eigh(H)
    Q = projection.basis()
    w, Z = np.linalg.eigh(Q.T @ H @ Q)
    return w, Q @ Z


def finalize(problem: Problem, state: HisdState, config: HisdConfig,
             projection: Optional[TangentProjection] = None, provenance=None) -> SaddlePoint:
    """Package a converged state, verifying the Morse index when affordable."""
    u = state.u
    point = SaddlePoint(
        u=u.copy(), index=None, cost=state.evaluation.cost, gradient_norm=state.gradient_norm,
        directions=state.V.copy(), target_index=config.k, y=state.evaluation.y.copy(),
        iterations=state.iteration, provenance=dict(provenance or {}), trace=list(state.trace),
    )
    if config.verify_index and problem.m <= config.hessian_cap:
        w, Z = verify_point(problem, u, config, projection)
        lo, hi = index_bounds(w, default_tau(w))
        point.index = lo
        point.index_bounds = (lo, hi)
        point.verified = True
        point.eigenvalues = w[: max(hi, lo) + 4].copy()
        point.directions = Z[:, :lo].copy()
        if lo != hi:
            point.flags.append("degenerate")
        if lo != config.k:
            point.flags.append("index-mismatch")
    else:
        point.index = config.k
        point.index_bounds = (config.k, config.k)
        point.flags.append("unverified")
    return point


def run_pchisd(problem: Problem, u0: np.ndarray, V0: Optional[np.ndarray], config: HisdConfig,
               projection: Optional[TangentProjection] = None, provenance=None,
               callback: Optional[Callable[[HisdState], None]] = None) -> SaddlePoint:
    """Iterate :func:`pchisd_step` until the (projected) gradient norm is below ``eps``.

    Raises :class:`HisdNonconvergence` when ``max_iter`` runs out.
    """
    if V0 is None:
        V0 = np.zeros((problem.m, 0))
    state = init_state(problem, u0, V0, config, projection)
    metric = Metric(problem, config.metric, projection, config.metric_shift)
    while state.gradient_norm >= config.eps:
        if state.iteration >= config.max_iter:
            raise HisdNonconvergence(
                f"no index-{config.k} saddle after {state.iteration} iterations "
                f"(|g| = {state.gradient_norm:.3e})", state,
            )
        state = pchisd_step(problem, state, config, projection, metric)
        if callback is not None:
            callback(state)
    return finalize(problem, state, config, projection, provenance)
