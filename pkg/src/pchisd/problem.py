"""Problem instances: operator, nonlinearities, target state and presets."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .grid import Grid, assemble_elliptic, assemble_regularizer, build_grid

PRESETS = ("oned", "case1", "case2", "case3")

# (x, s) -> values; x is an (m, dim) coordinate array, s an (m,) field
PointwiseFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class NonfiniteEvaluationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Nonlinearity:
    """A pointwise map ``f(x, s)`` with its first two ``s``-derivatives."""

    value: PointwiseFn
    first_derivative: PointwiseFn
    second_derivative: PointwiseFn
    name: str = ""
    # Identically zero: lets solvers reuse a single factorisation.
    is_zero: bool = False

    @classmethod
    def zero(cls) -> "Nonlinearity":
        z = lambda x, s: np.zeros_like(s, dtype=float)  # noqa: E731
        return cls(z, z, z, name="0", is_zero=True)

    def derivative(self, order: int) -> PointwiseFn:
        return (self.value, self.first_derivative, self.second_derivative)[order]

    def check_derivatives(self, x: np.ndarray, s: np.ndarray, step: float = 1e-5, rtol: float = 1e-6) -> float:
        """Worst relative mismatch of both derivatives against central differences.

        Raises ``ValueError`` when it exceeds ``rtol``.
        """
        worst = 0.0
        for lo, hi in ((self.value, self.first_derivative), (self.first_derivative, self.second_derivative)):
            fd = (lo(x, s + step) - lo(x, s - step)) / (2 * step)
            exact = hi(x, s)
            err = np.abs(fd - exact) / np.maximum(1.0, np.abs(exact))
            worst = max(worst, float(err.max()))
        if worst > rtol:
            raise ValueError(f"{self.name or 'nonlinearity'}: derivative mismatch {worst:.2e}")
        return worst


@dataclass(frozen=True)
class IntegralConstraint:
    """``integral of u over the domain = value``; on the unit domain, mean(u) = value."""

    value: float = 0.0


@dataclass(frozen=True, eq=False)
class Problem:
    grid: Grid
    A: sp.csr_matrix
    R: sp.csr_matrix
    d: Nonlinearity
    g: Nonlinearity
    y_d: np.ndarray
    lam: float
    constraint: Optional[IntegralConstraint] = None
    name: str = "custom"
    symmetric: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"regularisation weight must be positive, got {self.lam}")
        if np.shape(self.y_d) != (self.grid.m,):
            raise ValueError("target state has wrong length")
        for op in (self.A, self.R):
            if op.shape != (self.grid.m, self.grid.m):
                raise ValueError("operator shape does not match the grid")

    @property
    def m(self) -> int:
        return self.grid.m

    @cached_property
    def A_factor(self):
        """Cached sparse LU of the state operator (used when ``d`` is zero)."""
        from scipy.sparse.linalg import splu

        return splu(self.A.tocsc())

    @cached_property
    def R_factor(self):
        from scipy.sparse.linalg import splu

        return splu(self.R.tocsc())

    @cached_property
    def A_banded(self) -> np.ndarray:
        """LAPACK band storage ``(3, m)`` of a tridiagonal (1D) operator."""
        dia = self.A.todia()
        ab = np.zeros((3, self.m))
        for offset, row in zip(dia.offsets, dia.data):
            if abs(offset) > 1:
                raise ValueError("operator is not tridiagonal")
            ab[1 - offset] += row
        return ab

    @cached_property
    def A_diagonal_slots(self) -> np.ndarray:
        """Positions of the diagonal entries inside ``A.data`` (CSR)."""
        A = self.A
        A.sort_indices()
        slots = np.empty(self.m, dtype=np.int64)
        for i in range(self.m):
            lo, hi = A.indptr[i], A.indptr[i + 1]
            k = np.searchsorted(A.indices[lo:hi], i)
            if k >= hi - lo or A.indices[lo + k] != i:
                raise ValueError("operator has a structurally zero diagonal")
            slots[i] = lo + k
        return slots

    def with_lambda(self, lam: float) -> "Problem":
        return make_problem(
            self.grid, self.d, self.g, self.y_d, lam, A=self.A, R=self.R,
            constraint=self.constraint, name=self.name, symmetric=self.symmetric,
        )

    def describe(self) -> dict:
        return {
            "name": self.name,
            "lambda": self.lam,
            "grid": self.grid.metadata(),
            "constraint": None if self.constraint is None else {"value": self.constraint.value},
            "d": self.d.name,
            "g": self.g.name,
        }


def make_problem(grid, d, g, y_d, lam, a=1.0, c=1.0, A=None, R=None, constraint=None, name="custom", symmetric=False):
    """Build a :class:`Problem`; ``y_d`` may be a callable of coordinates or an array."""
    if A is None:
        A = assemble_elliptic(grid, a, c)
    if R is None:
        R = assemble_regularizer(grid)
    y_d = grid.sample(y_d) if callable(y_d) or np.isscalar(y_d) else np.asarray(y_d, dtype=float)
    return Problem(grid, A, R, d, g, y_d, float(lam), constraint, name, symmetric)


def sample_nonlinearity(f: Nonlinearity, grid: Grid, values: np.ndarray, order: int = 0) -> np.ndarray:
    """Pointwise evaluation of ``f`` (or a derivative) at every interior node.

    ``values`` may also be an ``m x b`` batch, one nodal field per column.
    """
    values = np.asarray(values, dtype=float)
    coords, flat = grid.coords, values
    if values.ndim == 2:
        coords = np.tile(grid.coords, (values.shape[1], 1))
        flat = values.ravel(order="F")
    with np.errstate(all="ignore"):  # non-finite values are reported below
        out = np.asarray(f.derivative(order)(coords, flat), dtype=float)
    out = np.broadcast_to(out, flat.shape).astype(float)
    bad = ~np.isfinite(out)
    if bad.any():
        k = int(np.argmax(bad)) % grid.m
        raise NonfiniteEvaluationError(
            f"{f.name or 'nonlinearity'} (order {order}) is not finite at node {k}, x={grid.coords[k]}"
        )
    return out.reshape(values.shape, order="F")


# --- preset nonlinearities -------------------------------------------------

def _cubic() -> Nonlinearity:
    return Nonlinearity(
        lambda x, y: y**3,
        lambda x, y: 3 * y**2,
        lambda x, y: 6 * y,
        name="y^3",
    )


def _cosine_control() -> Nonlinearity:
    tau = 2 * np.pi
    return Nonlinearity(
        lambda x, u: 0.001 * u**2 + np.cos(tau * u),
        lambda x, u: 0.002 * u - tau * np.sin(tau * u),
        lambda x, u: 0.002 - tau**2 * np.cos(tau * u),
        name="0.001u^2+cos(2pi u)",
    )


def _bump(u, a):
    return np.exp(-((u - a) ** 2))


def _triple_gaussian(skew: float) -> Nonlinearity:
    """``e^{-(u+1)^2} + e^{-(u-1)^2} - (1 + skew u^3) e^{-u^2}``."""

    def value(x, u):
        return _bump(u, -1) + _bump(u, 1) - (1 + skew * u**3) * _bump(u, 0)

    def first(x, u):
        q = 1 + skew * u**3
        dq = 3 * skew * u**2
        return (
            -2 * (u + 1) * _bump(u, -1)
            - 2 * (u - 1) * _bump(u, 1)
            - (dq - 2 * u * q) * _bump(u, 0)
        )

    def second(x, u):
        q = 1 + skew * u**3
        dq = 3 * skew * u**2
        ddq = 6 * skew * u
        gauss2 = lambda a: (4 * (u - a) ** 2 - 2) * _bump(u, a)  # noqa: E731
        return gauss2(-1) + gauss2(1) - (ddq - 4 * u * dq + (4 * u**2 - 2) * q) * _bump(u, 0)

    name = "e^-(u+1)^2+e^-(u-1)^2-e^-u^2" if skew == 0 else f"e^-(u+1)^2+e^-(u-1)^2-(1+{skew}u^3)e^-u^2"
    return Nonlinearity(value, first, second, name=name)


def make_preset(name: str, n: int, lam: float) -> Problem:
    """One of the four benchmark problems; ``lam`` is left free on purpose."""
    if name == "oned":
        grid = build_grid(1, n)
        return make_problem(
            grid, _cubic(), _cosine_control(),
            lambda x: -2 * np.sin(np.pi * x[:, 0]), lam, name=name, symmetric=True,
        )
    if name in ("case1", "case2", "case3"):
        grid = build_grid(2, n)
        skew = 0.0 if name == "case1" else 0.8
        constraint = IntegralConstraint(0.0) if name == "case3" else None
        return make_problem(
            grid, Nonlinearity.zero(), _triple_gaussian(skew), 2.0, lam,
            constraint=constraint, name=name, symmetric=(name == "case1"),
        )
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
