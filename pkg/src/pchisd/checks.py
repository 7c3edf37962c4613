"""Property checks run by ``pchisd verify``.

Each check returns a :class:`CheckResult`; nothing here raises on a failed
property.  ``gradient_fn`` arguments let a harness inject faults.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .baselines import BaselineFailure, bb_gradient_descent
from .hisd import HisdConfig, init_state, pchisd_step, projection_for
from .objective import dense_hessian, dimer_hvp, eval_cost, eval_gradient, morse_index
from .pde_solvers import solve_state
from .problem import PRESETS, make_preset

GradientFn = Callable[[object, np.ndarray], np.ndarray]


def adjoint_gradient(problem, u):
    return eval_gradient(problem, u).gradient


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        # numpy scalars are not JSON serialisable
        self.passed, self.value, self.threshold = bool(self.passed), float(self.value), float(self.threshold)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.detail} (value {self.value:.3e}, threshold {self.threshold:.1e})"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def fd_gradient(problem, u, delta=1e-5, indices=None):
    """Central differences of the discrete cost, scaled to the nodal gradient."""
    idx = range(problem.m) if indices is None else indices
    out = np.empty(len(idx))
    y0 = solve_state(problem, u)
    for j, i in enumerate(idx):
        e = np.zeros(problem.m)
        e[i] = delta
        jp = eval_cost(problem, u + e, solve_state(problem, u + e, warm_start=y0))
        jm = eval_cost(problem, u - e, solve_state(problem, u - e, warm_start=y0))
        out[j] = (jp - jm) / (2 * delta)
    return out / problem.grid.cell_volume


def relative_errors(a, b, floor=1e-3):
    """``|a - b| / max(|b|, floor * max|b|)`` componentwise."""
    scale = np.maximum(np.abs(b), floor * np.abs(b).max(initial=0.0))
    scale[scale == 0] = 1.0
    return np.abs(a - b) / scale


@_timed
def check_gradient(preset="oned", n=None, lam=0.02, controls=10, rtol=1e-5, seed=0,
                   gradient_fn: GradientFn = adjoint_gradient, amplitude=0.5) -> CheckResult:
    n = n or (64 if preset == "oned" else 16)
    problem = make_preset(preset, n, lam)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(controls):
        u = amplitude * rng.standard_normal(problem.m)
        if problem.constraint is not None:
            u -= u.mean()
        worst = max(worst, float(relative_errors(gradient_fn(problem, u), fd_gradient(problem, u)).max()))
    return CheckResult(f"gradient-fd/{preset}", worst <= rtol, worst, rtol,
                       f"{controls} random controls, N={n}")


@_timed
def check_dimer_order(preset="oned", n=16, lam=0.02, seed=0, lengths=(4e-2, 2e-2, 1e-2, 5e-3),
                      window=(1.8, 2.2)) -> CheckResult:
    problem = make_preset(preset, n, lam)
    rng = np.random.default_rng(seed)
    u = 0.3 * rng.standard_normal(problem.m)
    v = rng.standard_normal(problem.m)
    v /= np.linalg.norm(v)
    H = dense_hessian(problem, u, l=1e-5)
    ref = H @ v
    errs = np.array([np.linalg.norm(dimer_hvp(problem, u, v, l) - ref) for l in lengths])
    order = float(np.polyfit(np.log(lengths), np.log(errs), 1)[0])
    lo, hi = window
    return CheckResult(f"dimer-order/{preset}", lo <= order <= hi, order, hi,
                       f"fitted order {order:.3f} in [{lo}, {hi}]")


@_timed
def check_trivial_stationarity(n=16, tol=1e-12) -> CheckResult:
    worst = 0.0
    for preset in PRESETS:
        problem = make_preset(preset, n, 0.01)
        worst = max(worst, eval_gradient(problem, np.zeros(problem.m)).gradient_norm)
    return CheckResult("trivial-stationarity", worst <= tol, worst, tol, f"all presets, N={n}")


@_timed
def check_parent_index(n=64, lam=0.02, expected=4) -> CheckResult:
    problem = make_preset("oned", n, lam)
    k = morse_index(dense_hessian(problem, np.zeros(problem.m)))
    return CheckResult("parent-index/oned", k == expected, float(k), float(expected),
                       f"index {k} at u=0, N={n}, lambda={lam}")


@_timed
def check_constraint(n=16, lam=0.002, steps=50, seed=0, tol=1e-12) -> CheckResult:
    problem = make_preset("case3", n, lam)
    proj = projection_for(problem)
    rng = np.random.default_rng(seed)
    u = proj(0.2 * rng.standard_normal(problem.m))
    cfg = HisdConfig(k=1, max_iter=steps)
    v = proj(rng.standard_normal(problem.m))
    state = init_state(problem, u, (v / np.linalg.norm(v))[:, None], cfg, proj)
    worst = abs(state.u.mean())
    for _ in range(steps):
        state = pchisd_step(problem, state, cfg, proj)
        worst = max(worst, abs(state.u.mean()))
    return CheckResult("constraint/case3", worst <= tol, worst, tol, f"{steps} index-1 steps, N={n}")


@_timed
def check_k0_equivalence(n=16, lam=0.02, steps=100, seed=0, tol=1e-12) -> CheckResult:
    problem = make_preset("oned", n, lam)
    u0 = 0.3 * np.random.default_rng(seed).standard_normal(problem.m)
    cfg = HisdConfig(k=0, eps=1e-300, max_iter=steps)
    state = init_state(problem, u0, np.zeros((problem.m, 0)), cfg)
    a = []
    for _ in range(steps):
        state = pchisd_step(problem, state, cfg)
        a.append(state.u)
    b = []
    try:
        bb_gradient_descent(problem, u0, cfg, verify=False, callback=lambda i, u, ev: b.append(u))
    except BaselineFailure:
        pass
    dev = max(float(np.abs(x - y).max()) for x, y in zip(a, b)) if len(a) == len(b) else np.inf
    return CheckResult("k0-equivalence/oned", dev <= tol, dev, tol, f"{steps} steps, N={n}")


def run_all(gradient_fn: GradientFn = adjoint_gradient, index_n: int = 64, seed: int = 0,
            progress: Optional[Callable[[CheckResult], None]] = None) -> list:
    checks = [
        lambda: check_gradient("oned", 64, 0.02, seed=seed, gradient_fn=gradient_fn),
        lambda: check_gradient("case1", 16, 0.01, seed=seed, gradient_fn=gradient_fn),
        lambda: check_gradient("case2", 16, 0.002, seed=seed, gradient_fn=gradient_fn),
        lambda: check_gradient("case3", 16, 0.002, seed=seed, gradient_fn=gradient_fn),
        lambda: check_dimer_order(seed=seed),
        check_trivial_stationarity,
        lambda: check_parent_index(index_n),
        lambda: check_constraint(seed=seed),
        lambda: check_k0_equivalence(seed=seed),
    ]
    results = []
    for c in checks:
        r = c()
        results.append(r)
        if progress is not None:
            progress(r)
    return results
