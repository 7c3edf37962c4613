"""Uniform finite-difference grids and operators on the unit interval/square.

Only interior nodes carry unknowns; homogeneous Dirichlet values on the
boundary are eliminated.  Interior nodes are flattened with the first axis
index ``i`` running fastest, i.e. ``k = (i - 1) + (j - 1) * (N - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

Coefficient = Union[float, Callable[[np.ndarray], np.ndarray]]


class InvalidGridError(ValueError):
    pass


class CoercivityError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on ``[0, 1]^dim`` with spacing ``h = 1/n``."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidGridError(f"dim must be 1 or 2, got {self.dim}")
        if int(self.n) != self.n or self.n < 2:
            raise InvalidGridError(f"need an integer N >= 2, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def m(self) -> int:
        return (self.n - 1) ** self.dim

    @property
    def shape(self) -> tuple:
        return (self.n - 1,) * self.dim

    @property
    def cell_volume(self) -> float:
        """Quadrature weight ``h^dim`` of one interior node."""
        return self.h**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        """Interior coordinates along one axis, ``ih`` for ``i = 1..N-1``."""
        return np.arange(1, self.n) * self.h

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates as an ``(m, dim)`` array in flattening order."""
        if self.dim == 1:
            return self.axis[:, None].copy()
        x1, x2 = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.column_stack([x1.ravel(order="F"), x2.ravel(order="F")])

    def flatten(self, array: np.ndarray) -> np.ndarray:
        """Map an array indexed ``[i-1, j-1]`` to the flat interior vector."""
        array = np.asarray(array)
        if array.shape != self.shape:
            raise ValueError(f"expected shape {self.shape}, got {array.shape}")
        return array.ravel(order="F")

    def unflatten(self, values: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`flatten`."""
        values = np.asarray(values)
        if values.shape != (self.m,):
            raise ValueError(f"expected length {self.m}, got {values.shape}")
        return values.reshape(self.shape, order="F")

    def sample(self, f: Coefficient) -> np.ndarray:
        """Evaluate a scalar or vectorised ``f(coords)`` at all interior nodes."""
        return _evaluate(f, self.coords)

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Discrete L2 inner product ``h^dim * sum(a * b)``."""
        return float(self.cell_volume * np.dot(a, b))

    def norm(self, a: np.ndarray) -> float:
        """Discrete L2 (mesh-weighted) norm."""
        return float(np.sqrt(self.cell_volume) * np.linalg.norm(a))

    def metadata(self) -> dict:
        return {"dim": self.dim, "n": self.n, "h": self.h, "m": self.m}


def build_grid(dim: int, n: int) -> Grid:
    return Grid(dim=dim, n=n)


def _evaluate(f: Coefficient, points: np.ndarray) -> np.ndarray:
    if callable(f):
        values = np.asarray(f(points), dtype=float)
        return np.broadcast_to(values, (points.shape[0],)).astype(float)
    return np.full(points.shape[0], float(f))


def assemble_elliptic(grid: Grid, a: Coefficient = 1.0, c: Coefficient = 0.0) -> sp.csr_matrix:
    """Assemble ``-div(a grad .) + c`` with zero Dirichlet boundary values.

    Flux coefficients are evaluated directly at the half-grid midpoints, which
    keeps the matrix symmetric for variable ``a``.  ``a`` and ``c`` are either
    constants or callables taking an ``(k, dim)`` array of points.
    """
    h, n = grid.h, grid.n
    coords = grid.coords
    # 0-based interior multi-index of each flat node
    multi = np.rint(coords / h).astype(int) - 1

    diag = _evaluate(c, coords).copy()
    rows, cols, vals = [], [], []
    stride = 1
    for ax in range(grid.dim):
        shift = np.zeros(grid.dim)
        shift[ax] = 0.5 * h
        a_plus = _evaluate(a, coords + shift)
        a_minus = _evaluate(a, coords - shift)
        if np.any(a_plus <= 0) or np.any(a_minus <= 0):
            raise CoercivityError("diffusion coefficient must be positive at every midpoint")
        diag += (a_plus + a_minus) / h**2

        has_next = multi[:, ax] < n - 2
        k = np.nonzero(has_next)[0]
        rows += [k, k + stride]
        cols += [k + stride, k]
        off = -a_plus[has_next] / h**2
        vals += [off, off]
        stride *= n - 1

    rows.append(np.arange(grid.m))
    cols.append(np.arange(grid.m))
    vals.append(diag)
    op = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.m, grid.m),
    )
    return op.tocsr()


def assemble_regularizer(grid: Grid) -> sp.csr_matrix:
    """Discrete ``-Laplace + I`` acting on controls that vanish on the boundary."""
    return assemble_elliptic(grid, 1.0, 1.0)


def is_symmetric(op: sp.spmatrix, rtol: float = 1e-14) -> bool:
    diff = abs(op - op.T)
    scale = max(abs(op).max(), 1.0)
    return bool(diff.max() <= rtol * scale) if diff.nnz else True
