"""Uniform space-time grids, finite-difference operators and discrete norms.

Nodes live on ``Omega x [0, T]`` with ``Omega`` a box in one or two space
dimensions.  Grid functions are stored as arrays of shape ``(nt, *nx)``; the
flat node index is the C-order (time-major) ravel of that array, i.e.

    index = (it * nx[0] + i1) * nx[1] + i2

so the time level is the slowest index and the last spatial axis the fastest.
Every sparse operator in the package uses this ordering.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GridSpec",
    "Grid",
    "Field",
    "SpaceField",
    "NormKind",
    "build_grid",
    "diff",
    "discrete_norm",
    "gram_matrix",
    "trapezoid_weights",
]

MIN_NODES = 4


@dataclass(frozen=True)
class GridSpec:
    spatial_dim: int
    box_lengths: tuple[float, ...]
    nx: tuple[int, ...]
    nt: int
    T: float

    def __post_init__(self):
        object.__setattr__(self, "box_lengths", tuple(float(v) for v in _as_tuple(self.box_lengths)))
        object.__setattr__(self, "nx", tuple(int(v) for v in _as_tuple(self.nx)))
        if self.spatial_dim not in (1, 2):
            raise ValueError(f"spatial_dim must be 1 or 2, got {self.spatial_dim}")
        if len(self.box_lengths) == 1 and self.spatial_dim == 2:
            object.__setattr__(self, "box_lengths", self.box_lengths * 2)
        if len(self.nx) == 1 and self.spatial_dim == 2:
            object.__setattr__(self, "nx", self.nx * 2)
        if len(self.box_lengths) != self.spatial_dim or len(self.nx) != self.spatial_dim:
            raise ValueError("box_lengths and nx need one entry per spatial axis")
        if any(not (v > 0 and math.isfinite(v)) for v in self.box_lengths):
            raise ValueError(f"box lengths must be positive, got {self.box_lengths}")
        if any(n < MIN_NODES for n in self.nx):
            raise ValueError(f"need at least {MIN_NODES} nodes per spatial axis, got {self.nx}")
        if self.nt < MIN_NODES:
            raise ValueError(f"need at least {MIN_NODES} time levels, got {self.nt}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"final time must be positive, got {self.T}")

    @property
    def node_count(self) -> int:
        return self.nt * math.prod(self.nx)

    def to_dict(self) -> dict:
        return {
            "spatial_dim": self.spatial_dim,
            "box_lengths": list(self.box_lengths),
            "nx": list(self.nx),
            "nt": self.nt,
            "T": self.T,
        }

    def refined(self, factor: int) -> "GridSpec":
        """Spec with every mesh width divided by ``factor`` (nested nodes)."""
        return GridSpec(
            self.spatial_dim,
            self.box_lengths,
            tuple(factor * (n - 1) + 1 for n in self.nx),
            factor * (self.nt - 1) + 1,
            self.T,
        )


def _as_tuple(v) -> tuple:
    if isinstance(v, (list, tuple, np.ndarray)):
        return tuple(v)
    return (v,)


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _d1(n: int, h: float) -> sp.csr_matrix:
    """First derivative: centered inside, second-order one-sided at the ends."""
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5, 0.5]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 1, n - 2, n - 3]
    vals += [-1.5, 2.0, -0.5, 1.5, -2.0, 0.5]
    return sp.csr_matrix((np.array(vals) / h, (rows, cols)), shape=(n, n))


def _d2(n: int, h: float) -> sp.csr_matrix:
    """Second derivative: 3-point centered inside, 4-point one-sided at the ends."""
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i, i]
        cols += [i - 1, i, i + 1]
        vals += [1.0, -2.0, 1.0]
    rows += [0] * 4 + [n - 1] * 4
    cols += [0, 1, 2, 3, n - 1, n - 2, n - 3, n - 4]
    vals += [2.0, -5.0, 4.0, -1.0] * 2
    return sp.csr_matrix((np.array(vals) / h**2, (rows, cols)), shape=(n, n))


def _d1d(n: int, h: float, order: int) -> sp.csr_matrix:
    if order == 0:
        return sp.identity(n, format="csr")
    if order == 1:
        return _d1(n, h)
    if order == 2:
        return _d2(n, h)
    if order == 3:
        return (_d1(n, h) @ _d2(n, h)).tocsr()
    if order == 4:
        return (_d2(n, h) @ _d2(n, h)).tocsr()
    raise ValueError(f"derivative order {order} not supported")


class Grid:
    """Node coordinates, index sets and cached difference operators for a GridSpec.

    Axis 0 is time; axes ``1..d`` are the spatial axes ``x1..xd``.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.dim = spec.spatial_dim
        self.T = spec.T
        self.nt = spec.nt
        self.nx = spec.nx
        self.shape = (spec.nt, *spec.nx)
        self.space_shape = tuple(spec.nx)
        self.size = spec.node_count
        self.space_size = math.prod(spec.nx)
        self.dt = spec.T / (spec.nt - 1)
        self.h = tuple(L / (n - 1) for L, n in zip(spec.box_lengths, spec.nx))
        self.t = np.linspace(0.0, spec.T, spec.nt)
        self.x = tuple(np.linspace(0.0, L, n) for L, n in zip(spec.box_lengths, spec.nx))
        self._ops: dict = {}

    def __repr__(self):
        return f"Grid(nt={self.nt}, nx={self.nx}, T={self.T}, lengths={self.spec.box_lengths})"

    # -- coordinates -----------------------------------------------------
    @cached_property
    def mesh(self) -> tuple[np.ndarray, ...]:
        """``(t, x1, ..., xd)`` broadcast to the full node shape."""
        return tuple(np.meshgrid(self.t, *self.x, indexing="ij"))

    @cached_property
    def space_mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.x, indexing="ij"))

    # -- node sets -------------------------------------------------------
    @cached_property
    def space_boundary_mask(self) -> np.ndarray:
        m = np.zeros(self.space_shape, dtype=bool)
        for ax in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[ax] = 0
            m[tuple(idx)] = True
            idx[ax] = -1
            m[tuple(idx)] = True
        return m

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Nodes on the lateral boundary ``S_T`` (all time levels)."""
        return np.broadcast_to(self.space_boundary_mask, self.shape).copy()

    @cached_property
    def final_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[-1] = True
        return m

    @cached_property
    def interior_mask(self) -> np.ndarray:
        """Spatially interior nodes at every time level."""
        return ~self.boundary_mask

    @cached_property
    def free_mask(self) -> np.ndarray:
        """Unknowns of the lifted problems: not on ``S_T`` and not at ``t = T``."""
        return ~(self.boundary_mask | self.final_mask)

    @cached_property
    def free_index(self) -> np.ndarray:
        return np.flatnonzero(self.free_mask.ravel())

    @cached_property
    def prolongation(self) -> sp.csr_matrix:
        """Injection of free-DOF vectors into full node vectors (zeros elsewhere)."""
        idx = self.free_index
        return sp.csr_matrix(
            (np.ones(idx.size), (idx, np.arange(idx.size))), shape=(self.size, idx.size)
        )

    # -- quadrature ------------------------------------------------------
    @cached_property
    def space_weights(self) -> np.ndarray:
        w = np.ones(())
        for n, h in zip(self.nx, self.h):
            w = np.multiply.outer(w, trapezoid_weights(n, h))
        return w

    @cached_property
    def time_weights(self) -> np.ndarray:
        return trapezoid_weights(self.nt, self.dt)

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoidal weights on the full space-time node array."""
        return np.multiply.outer(self.time_weights, self.space_weights)

    def snap_time(self, tau: float) -> tuple[int, float]:
        """Nearest time level to ``tau``; returns ``(index, snapped value)``."""
        if not (0.0 <= tau < self.T):
            raise ValueError(f"tau must lie in [0, T), got {tau}")
        it = int(np.argmin(np.abs(self.t - tau)))
        it = min(it, self.nt - 2)
        return it, float(self.t[it])

    def tail_time_weights(self, tau: float) -> np.ndarray:
        """Trapezoidal time weights for ``(tau, T)`` with tau snapped to the grid."""
        it, _ = self.snap_time(tau)
        w = np.zeros(self.nt)
        w[it:] = trapezoid_weights(self.nt - it, self.dt)
        return w

    # -- operators -------------------------------------------------------
    def derivative_matrix(self, orders: Sequence[int]) -> sp.csr_matrix:
        """Sparse matrix of the mixed derivative ``d^orders[0]/dt ... d^orders[d]/dx_d``."""
        orders = tuple(int(o) for o in orders)
        if len(orders) != self.dim + 1:
            raise ValueError(f"expected {self.dim + 1} derivative orders, got {orders}")
        key = ("D", orders)
        if key not in self._ops:
            steps = (self.dt, *self.h)
            factors = [_d1d(n, hh, o) for n, hh, o in zip(self.shape, steps, orders)]
            m = factors[0]
            for f in factors[1:]:
                m = sp.kron(m, f, format="csr")
            self._ops[key] = m.tocsr()
        return self._ops[key]

    def space_derivative_matrix(self, orders: Sequence[int]) -> sp.csr_matrix:
        """Derivative acting on a single time level (spatial node vector)."""
        orders = tuple(int(o) for o in orders)
        if len(orders) != self.dim:
            raise ValueError(f"expected {self.dim} spatial derivative orders, got {orders}")
        key = ("Dx", orders)
        if key not in self._ops:
            factors = [_d1d(n, hh, o) for n, hh, o in zip(self.nx, self.h, orders)]
            m = factors[0]
            for f in factors[1:]:
                m = sp.kron(m, f, format="csr")
            self._ops[key] = m.tocsr()
        return self._ops[key]

    def operator(self, which: str) -> sp.csr_matrix:
        return self.derivative_matrix(parse_derivative_tag(which, self.dim))

    def gradient_matrices(self) -> list[sp.csr_matrix]:
        """Spatial first-derivative operators ``d/dx_i`` on the full space-time grid."""
        out = []
        for i in range(self.dim):
            orders = [0] * (self.dim + 1)
            orders[i + 1] = 1
            out.append(self.derivative_matrix(orders))
        return out

    def multi_indices(self, order: int) -> list[tuple[int, ...]]:
        """All space-time multi-indices of total order <= ``order``."""
        return [
            b for b in itertools.product(range(order + 1), repeat=self.dim + 1) if sum(b) <= order
        ]

    # -- field constructors ----------------------------------------------
    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def field_from(self, fn) -> "Field":
        """Sample ``fn(t, x1, ..., xd)`` on all nodes."""
        return Field(self, np.broadcast_to(fn(*self.mesh), self.shape).astype(float))

    def space_field_from(self, fn) -> "SpaceField":
        return SpaceField(self, np.broadcast_to(fn(*self.space_mesh), self.space_shape).astype(float))


def parse_derivative_tag(which: str, dim: int) -> tuple[int, ...]:
    """Translate tags like ``"t"``, ``"x1x2"``, ``"tx1"``, ``"tt"`` into axis orders."""
    orders = [0] * (dim + 1)
    s = which.strip()
    i = 0
    if not s:
        raise ValueError("empty derivative tag")
    while i < len(s):
        if s[i] == "t":
            orders[0] += 1
            i += 1
        elif s[i] == "x" and i + 1 < len(s) and s[i + 1].isdigit():
            ax = int(s[i + 1])
            if not 1 <= ax <= dim:
                raise ValueError(f"axis x{ax} does not exist in {dim}-D")
            orders[ax] += 1
            i += 2
        else:
            raise ValueError(f"cannot parse derivative tag {which!r}")
    return tuple(orders)


def build_grid(spec: GridSpec) -> Grid:
    return Grid(spec)


class Field:
    """Real grid function on all space-time nodes of ``grid``."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=float)
        if values.size != grid.size:
            raise ValueError(f"field has {values.size} values, grid has {grid.size} nodes")
        values = values.reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        self.grid = grid
        self.values = values

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def level(self, it: int) -> "SpaceField":
        return SpaceField(self.grid, self.values[it].copy())

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def _coerce(self, other):
        if isinstance(other, Field):
            if other.grid.shape != self.grid.shape:
                raise ValueError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return Field(self.grid, self.values + self._coerce(other))

    def __sub__(self, other):
        return Field(self.grid, self.values - self._coerce(other))

    def __mul__(self, other):
        return Field(self.grid, self.values * self._coerce(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)

    def __repr__(self):
        return f"Field(shape={self.grid.shape}, max|v|={np.abs(self.values).max():.3g})"


class SpaceField:
    """Real grid function on the spatial nodes of ``grid`` (one time level)."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=float)
        if values.size != grid.space_size:
            raise ValueError(f"space field has {values.size} values, expected {grid.space_size}")
        values = values.reshape(grid.space_shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("space field contains non-finite values")
        self.grid = grid
        self.values = values

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def copy(self) -> "SpaceField":
        return SpaceField(self.grid, self.values.copy())

    def broadcast(self) -> Field:
        """Time-independent space-time field equal to this one at every level."""
        return Field(self.grid, np.broadcast_to(self.values, self.grid.shape))

    def __add__(self, other):
        o = other.values if isinstance(other, SpaceField) else other
        return SpaceField(self.grid, self.values + o)

    def __sub__(self, other):
        o = other.values if isinstance(other, SpaceField) else other
        return SpaceField(self.grid, self.values - o)


@dataclass(frozen=True)
class NormKind:
    """Which discrete norm to take.

    tag is one of ``"L2_QT"``, ``"L2_Omega"``, ``"H10_QTtau"`` (needs ``tau``)
    or ``"Hk_QT"`` (needs ``order`` in {2, 3, 4}; ``H2_QT`` is accepted as an
    alias for order 2).
    """

    tag: str
    tau: float | None = None
    order: int = 2

    def __post_init__(self):
        if self.tag == "H2_QT":
            object.__setattr__(self, "tag", "Hk_QT")
            object.__setattr__(self, "order", 2)
        if self.tag not in ("L2_QT", "L2_Omega", "H10_QTtau", "Hk_QT"):
            raise ValueError(f"unknown norm tag {self.tag!r}")
        if self.tag == "H10_QTtau" and self.tau is None:
            raise ValueError("H10_QTtau needs tau")
        if self.tag == "Hk_QT" and self.order not in (2, 3, 4):
            raise ValueError(f"Sobolev order must be 2, 3 or 4, got {self.order}")

    @classmethod
    def l2(cls) -> "NormKind":
        return cls("L2_QT")

    @classmethod
    def l2_space(cls) -> "NormKind":
        return cls("L2_Omega")

    @classmethod
    def h10(cls, tau: float) -> "NormKind":
        return cls("H10_QTtau", tau=tau)

    @classmethod
    def hk(cls, order: int = 2) -> "NormKind":
        return cls("Hk_QT", order=order)


def _weights_for(grid: Grid, kind: NormKind) -> np.ndarray:
    if kind.tag == "H10_QTtau":
        return np.multiply.outer(grid.tail_time_weights(kind.tau), grid.space_weights).ravel()
    return grid.weights.ravel()


def gram_matrix(grid: Grid, kind: NormKind) -> sp.csr_matrix:
    """Symmetric matrix ``M`` with ``||u||^2 = u^T M u`` for space-time fields."""
    if kind.tag == "L2_Omega":
        raise ValueError("L2_Omega is a norm on space fields")
    key = ("gram", kind)
    if key in grid._ops:
        return grid._ops[key]
    w = _weights_for(grid, kind)
    W = sp.diags(w)
    if kind.tag == "L2_QT":
        M = W.tocsr()
    elif kind.tag == "H10_QTtau":
        M = W.copy()
        for D in grid.gradient_matrices():
            M = M + D.T @ W @ D
    else:
        M = None
        for beta in grid.multi_indices(kind.order):
            D = grid.derivative_matrix(beta)
            term = D.T @ W @ D
            M = term if M is None else M + term
    M = sp.csr_matrix(M)
    M = 0.5 * (M + M.T)
    grid._ops[key] = M.tocsr()
    return grid._ops[key]


def diff(f: Field, which: str) -> Field:
    """Finite-difference derivative of ``f``; ``which`` is e.g. ``"t"``, ``"x1x1"``, ``"tx1"``."""
    return Field(f.grid, f.grid.operator(which) @ f.flat)


def discrete_norm(f: Field | SpaceField, kind: NormKind) -> float:
    grid = f.grid
    if isinstance(f, SpaceField):
        if kind.tag != "L2_Omega":
            raise ValueError(f"{kind.tag} is not defined for a space field")
        return float(np.sqrt(np.sum(grid.space_weights * f.values**2)))
    if kind.tag == "L2_Omega":
        raise ValueError("L2_Omega needs a SpaceField; use field.level(it)")
    u = f.flat
    w = _weights_for(grid, kind)
    if kind.tag == "L2_QT":
        total = np.sum(w * u * u)
    elif kind.tag == "H10_QTtau":
        total = np.sum(w * u * u)
        for D in grid.gradient_matrices():
            du = D @ u
            total += np.sum(w * du * du)
    else:
        total = 0.0
        for beta in grid.multi_indices(kind.order):
            du = grid.derivative_matrix(beta) @ u
            total += np.sum(w * du * du)
    return float(np.sqrt(max(total, 0.0)))


def snap_report(grid: Grid, tau: float) -> dict:
    it, t = grid.snap_time(tau)
    return {"tau_requested": tau, "tau_snapped": t, "time_index": it}
