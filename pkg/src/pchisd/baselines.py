"""Reference solvers: BB gradient descent, full-space Newton-KKT, basin sweeps.

Newton-KKT works on the first-order system of the Lagrangian with the
adjoint sign used by :func:`pchisd.objective.eval_gradient`::

    F_y = A y + d(y) - g(u)
    F_p = A^T p + d_y(y) p - (y - y_d)
    F_u = lam R u + p g_u(u)

so that ``F_u`` is exactly the reduced gradient once ``F_y = F_p = 0``.
The Jacobian with respect to ``(y, p, u)`` is::

    [ A + D_y             0             -diag(g_u)          ]
    [ diag(d_yy p) - I    A^T + D_y      0                  ]
    [ 0                   diag(g_u)      lam R + diag(p g_uu) ]
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hisd import HisdConfig, HisdState, SaddlePoint, finalize
from .landscape import dedup_match
from .objective import eval_gradient
from .pde_solvers import SolverError, solve_adjoint, solve_state
from .problem import Problem, sample_nonlinearity

log = logging.getLogger(__name__)

SWEEP_SCHEMA = "pchisd.sweep/1"


class BaselineFailure(RuntimeError):
    """A baseline run that stopped without converging.

    ``reason`` is one of ``"max_iter"``, ``"divergence"`` or ``"singular"``.
    """

    def __init__(self, message, reason, u=None, iterations=0, trace=None):
        super().__init__(message)
        self.reason = reason
        self.u = u
        self.iterations = iterations
        self.trace = trace or []


# --- gradient descent -------------------------------------------------------

def bb_gradient_descent(problem: Problem, u0: np.ndarray, config: HisdConfig = HisdConfig(),
                        verify: Optional[bool] = None, callback=None) -> SaddlePoint:
    """``u <- u - beta * grad`` with alternating BB1 (odd steps) / BB2 (even) lengths.

    ``beta`` starts at ``config.beta0`` and is clamped to
    ``[beta_min, beta_max]``.  ``verify=None`` follows ``config.verify_index``.
    """
    u = np.array(u0, dtype=float, copy=True)
    if not np.all(np.isfinite(u)):
        raise ValueError("initial control must be finite")
    ev = eval_gradient(problem, u, config.settings)
    beta = config.beta0
    trace = [(0, ev.cost, ev.gradient_norm, beta, 0.0)]
    prev_u = prev_g = None
    n = 0
    while ev.gradient_norm >= config.eps:
        if n >= config.max_iter:
            raise BaselineFailure(
                f"gradient descent: |g| = {ev.gradient_norm:.3e} after {n} steps", "max_iter", u, n, trace
            )
        g = ev.gradient
        if config.bb and prev_u is not None:
            s = u - prev_u
            dg = g - prev_g
            sy = s @ dg
            num, den = (s @ s, sy) if n % 2 == 1 else (sy, dg @ dg)
            if abs(den) > 1e-30:
                beta = min(max(abs(num / den), config.beta_min), config.beta_max)
        prev_u, prev_g = u, g
        u = u - beta * g
        n += 1
        try:
            ev = eval_gradient(problem, u, config.settings, warm_start=ev.y)
        except (SolverError, FloatingPointError) as exc:
            raise BaselineFailure(f"gradient descent diverged at step {n}: {exc}", "divergence", u, n, trace)
        if not (np.isfinite(ev.cost) and np.all(np.isfinite(ev.gradient))):
            raise BaselineFailure(f"non-finite gradient at step {n}", "divergence", u, n, trace)
        trace.append((n, ev.cost, ev.gradient_norm, beta, 0.0))
        if callback is not None:
            callback(n, u, ev)
    return _as_point(problem, u, ev, n, trace, config, verify)


def _as_point(problem, u, ev, iterations, trace, config, verify) -> SaddlePoint:
    verify = config.verify_index if verify is None else verify
    state = HisdState(u=u, V=np.zeros((problem.m, 0)), evaluation=ev, iteration=iterations, trace=trace)
    return finalize(problem, state, replace(config, k=0, verify_index=verify))


# --- Newton-KKT -------------------------------------------------------------

@dataclass
class KktIterate:
    y: np.ndarray
    p: np.ndarray
    u: np.ndarray
    residuals: tuple = (np.inf, np.inf, np.inf)  # mesh-weighted norms of F_y, F_p, F_u
    iterations: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.y.shape == self.p.shape == self.u.shape):
            raise ValueError("y, p and u must have the same length")

    @classmethod
    def from_control(cls, problem: Problem, u: np.ndarray) -> "KktIterate":
        """State and adjoint consistent with ``u``."""
        u = np.asarray(u, dtype=float)
        y = solve_state(problem, u)
        return cls(y=y, p=solve_adjoint(problem, y), u=u.copy())


def kkt_residual(problem: Problem, y, p, u) -> np.ndarray:
    grid = problem.grid
    A = problem.A
    d = sample_nonlinearity(problem.d, grid, y)
    dy = sample_nonlinearity(problem.d, grid, y, 1)
    g = sample_nonlinearity(problem.g, grid, u)
    gu = sample_nonlinearity(problem.g, grid, u, 1)
    return np.concatenate([
        A @ y + d - g,
        A.T @ p + dy * p - (y - problem.y_d),
        problem.lam * (problem.R @ u) + p * gu,
    ])


def kkt_jacobian(problem: Problem, y, p, u) -> sp.csc_matrix:
    grid = problem.grid
    A = problem.A
    dy = sample_nonlinearity(problem.d, grid, y, 1)
    dyy = sample_nonlinearity(problem.d, grid, y, 2)
    gu = sample_nonlinearity(problem.g, grid, u, 1)
    guu = sample_nonlinearity(problem.g, grid, u, 2)
    I = sp.identity(problem.m, format="csr")
    K = A + sp.diags(dy)
    return sp.bmat([
        [K, None, -sp.diags(gu)],
        [sp.diags(dyy * p) - I, K.T, None],
        [None, sp.diags(gu), problem.lam * problem.R + sp.diags(p * guu)],
    ], format="csc")


def _block_norms(problem, F):
    m = problem.m
    return tuple(problem.grid.norm(F[i * m:(i + 1) * m]) for i in range(3))


def newton_kkt(problem: Problem, init: KktIterate, tol: float = 1e-8, max_iter: int = 50,
               max_halvings: int = 10) -> KktIterate:
    """Full-space Newton on the KKT system with a residual-halving damper.

    Stops when all three block norms are below ``tol``.
    """
    m = problem.m
    x = np.concatenate([init.y, init.p, init.u]).astype(float)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial iterate must be finite")
    F = kkt_residual(problem, x[:m], x[m:2 * m], x[2 * m:])
    history = [float(np.linalg.norm(F))]
    it = 0
    while max(_block_norms(problem, F)) >= tol:
        if it >= max_iter:
            raise BaselineFailure(
                f"Newton-KKT: residual {history[-1]:.3e} after {it} steps", "max_iter", x[2 * m:], it, history
            )
        J = kkt_jacobian(problem, x[:m], x[m:2 * m], x[2 * m:])
        try:
            with np.errstate(all="ignore"):
                dx = spla.splu(J).solve(-F)
        except RuntimeError as exc:
            raise BaselineFailure(f"singular KKT matrix: {exc}", "singular", x[2 * m:], it, history)
        if not np.all(np.isfinite(dx)):
            raise BaselineFailure("singular KKT matrix", "singular", x[2 * m:], it, history)
        res = np.linalg.norm(F)
        t = 1.0
        for _ in range(max_halvings + 1):
            x_new = x + t * dx
            try:
                F_new = kkt_residual(problem, x_new[:m], x_new[m:2 * m], x_new[2 * m:])
            except FloatingPointError:
                F_new = np.full_like(F, np.inf)
            if np.linalg.norm(F_new) < res:
                break
            t *= 0.5
        if not np.all(np.isfinite(F_new)):
            raise BaselineFailure("Newton-KKT diverged", "divergence", x[2 * m:], it, history)
        x, F = x_new, F_new
        it += 1
        history.append(float(np.linalg.norm(F)))
    return KktIterate(y=x[:m].copy(), p=x[m:2 * m].copy(), u=x[2 * m:].copy(),
                      residuals=_block_norms(problem, F), iterations=it, history=history)


# --- basin sweep ------------------------------------------------------------

@dataclass(frozen=True)
class SweepRange:
    lo: float = -10.0
    hi: float = 10.0
    step: float = 0.01

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("sweep range needs lo < hi")
        if not self.step > 0:
            raise ValueError("sweep step must be positive")

    @property
    def values(self) -> np.ndarray:
        count = int(np.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return self.lo + self.step * np.arange(count)


@dataclass
class SweepRow:
    u0: float
    outcome_id: str
    iterations: int
    final_cost: float
    final_gradient_norm: float
    index: Optional[int] = None


@dataclass
class SweepResult:
    rows: list
    outcomes: dict  # outcome id -> SaddlePoint
    method: str
    range: SweepRange
    problem: dict = field(default_factory=dict)

    @property
    def minima(self) -> dict:
        return {k: p for k, p in self.outcomes.items() if p.index == 0}

    def segments(self) -> list:
        """Maximal runs of consecutive initial values with the same outcome."""
        segs = []
        for row in self.rows:
            if segs and segs[-1]["outcome"] == row.outcome_id:
                segs[-1]["hi"] = row.u0
                segs[-1]["count"] += 1
            else:
                segs.append({"outcome": row.outcome_id, "lo": row.u0, "hi": row.u0, "count": 1})
        return segs

    def measure(self, outcomes: Optional[Sequence[str]] = None) -> float:
        """Total length (``count * step``) of initial values ending in ``outcomes``.

        Defaults to every minimum.
        """
        keep = set(self.minima) if outcomes is None else set(outcomes)
        return self.range.step * sum(1 for r in self.rows if r.outcome_id in keep)

    def global_minima(self, rtol: float = 1e-8) -> list:
        mins = self.minima
        if not mins:
            return []
        best = min(p.cost for p in mins.values())
        return [k for k, p in mins.items() if p.cost <= best + rtol * max(1.0, abs(best))]

    def summary(self) -> dict:
        glob = self.global_minima()
        return {
            "schema_version": SWEEP_SCHEMA,
            "problem": self.problem,
            "method": self.method,
            "range": {"lo": self.range.lo, "hi": self.range.hi, "step": self.range.step},
            "runs": len(self.rows),
            "outcomes": {
                k: {"index": p.index, "cost": p.cost, "global_candidate": k in glob}
                for k, p in sorted(self.outcomes.items())
            },
            "measure_minima": self.measure(),
            "measure_global": self.measure(glob),
            "segments": self.segments(),
        }

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# schema: {SWEEP_SCHEMA}\n")
            fh.write("u0,outcome_id,iterations,final_cost,final_gradient_norm\n")
            for r in self.rows:
                fh.write(f"{r.u0!r},{r.outcome_id},{r.iterations},{r.final_cost!r},{r.final_gradient_norm!r}\n")

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=1))


def _single_run(problem, u0, method, config, kkt_tol, kkt_max_iter):
    """Run one method from a constant control; returns ``(u, ev, iterations)`` or a failure string."""
    u_init = np.full(problem.m, u0)
    try:
        if method == "gradient":
            pt = bb_gradient_descent(problem, u_init, config, verify=False)
            return pt.u, None, pt.iterations
        it = newton_kkt(problem, KktIterate.from_control(problem, u_init), kkt_tol, kkt_max_iter)
        return it.u, None, it.iterations
    except BaselineFailure as exc:
        return None, exc.reason, exc.iterations
    except (SolverError, FloatingPointError):
        return None, "divergence", 0


def basin_sweep(problem: Problem, rng: SweepRange = SweepRange(), method: str = "gradient",
                config: HisdConfig = HisdConfig(max_iter=5000), reference: Sequence[SaddlePoint] = (),
                rel_tol: float = 1e-4, kkt_tol: float = 1e-8, kkt_max_iter: int = 50,
                workers: int = 1) -> SweepResult:
    """Run ``method`` from every constant control ``lo + j * step``.

    Outcomes are matched against ``reference`` points first, then against
    points already found in this sweep; a new stationary point is index
    verified once.  Failed runs get the outcome ``"nonconvergence"``.
    """
    if method not in ("gradient", "newton"):
        raise ValueError("method must be 'gradient' or 'newton'")
    values = rng.values

    def job(v):
        return _single_run(problem, float(v), method, config, kkt_tol, kkt_max_iter)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(job, values))
    else:
        raw = [job(v) for v in values]

    outcomes: dict = {}
    for ref in reference:
        outcomes.setdefault(ref.id, ref)
    rows = []
    for v, (u, reason, iters) in zip(values, raw):
        if u is None:
            rows.append(SweepRow(float(v), "nonconvergence", iters, float("nan"), float("nan")))
            continue
        ev = eval_gradient(problem, u, config.settings)
        key = next((k for k, p in outcomes.items() if dedup_match(p.u, u, rel_tol)), None)
        if key is None:
            state = HisdState(u=u, V=np.zeros((problem.m, 0)), evaluation=ev, iteration=iters)
            point = finalize(problem, state, config.with_k(0))
            point.flags = [f for f in point.flags if f != "index-mismatch"]
            key = point.id
            outcomes[key] = point
        rows.append(SweepRow(float(v), key, iters, ev.cost, ev.gradient_norm, outcomes[key].index))
    used = {r.outcome_id for r in rows}
    return SweepResult(rows=rows, outcomes={k: p for k, p in outcomes.items() if k in used},
                       method=method, range=rng, problem=problem.describe())
