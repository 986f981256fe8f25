"""Forward (well-posed) solver used to manufacture final-time data.

Crank-Nicolson for the principal part, with the lower-order terms and the
nonlinearity treated by one explicit predictor and one corrector per step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Field, Grid, GridSpec, SpaceField, discrete_norm, NormKind, build_grid
from .model import CoefficientSet, Nonlinearity, check_boundary_compatible, check_ellipticity

__all__ = [
    "ForwardProblem",
    "ForwardSolveError",
    "solve_forward",
    "extract_final",
    "insert_final",
    "add_noise",
    "restrict",
    "generate_data",
    "save_field",
    "load_field",
]


class ForwardSolveError(RuntimeError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


@dataclass
class ForwardProblem:
    coeffs: CoefficientSet
    F: Nonlinearity
    u0: object  # SpaceField or callable (x1, ..., xd) -> values


def _initial_values(problem: ForwardProblem, grid: Grid) -> np.ndarray:
    u0 = problem.u0
    if isinstance(u0, SpaceField):
        if u0.grid.space_shape != grid.space_shape:
            raise ValueError("initial condition lives on a different spatial grid")
        sf = u0
    else:
        sf = grid.space_field_from(u0)
    check_boundary_compatible(sf)
    return sf.values.ravel().copy()


def solve_forward(problem: ForwardProblem, grid: Grid) -> Field:
    """March ``u_t = Lu + Au + p + N`` from ``u(., 0) = u0`` with zero Dirichlet data."""
    coeffs, N = problem.coeffs, problem.F
    check_ellipticity(coeffs, grid, raise_on_fail=True)
    dt = grid.dt
    if N.lipschitz_C * dt >= 0.5:
        raise ValueError(f"time step too large for the explicit nonlinear term: dt*C = {dt * N.lipschitz_C}")

    d = grid.dim
    ns = grid.space_size
    interior = np.flatnonzero(~grid.space_boundary_mask.ravel())
    s = coeffs.sample(grid)
    grads = [grid.space_derivative_matrix([1 if k == i else 0 for k in range(d)]) for i in range(d)]
    second = {}
    for i in range(d):
        for j in range(d):
            orders = [0] * d
            orders[i] += 1
            orders[j] += 1
            second[i, j] = grid.space_derivative_matrix(orders)
    space_mesh = [m.ravel() for m in grid.space_mesh]

    def L_at(n):
        M = sp.csr_matrix((ns, ns))
        for (i, j), D in second.items():
            aij = s["a"][i, j, n].ravel()
            if np.any(aij):
                M = M + sp.diags(aij) @ D
        return M.tocsr()

    def rhs_at(n, u):
        grad = np.stack([G @ u for G in grads])
        b = s["b"][:, n].reshape(d, -1)
        t = np.full(ns, grid.t[n])
        return (np.einsum("jn,jn->n", b, grad) + s["c"][n].ravel() * u + s["p"][n].ravel()
                + N.value(grad, u, t, *space_mesh))

    U = np.zeros((grid.nt, ns))
    U[0] = _initial_values(problem, grid)
    I = sp.identity(interior.size, format="csc")
    L_prev = L_at(0)
    const_L = coeffs.is_constant_in_time
    lu = None
    for n in range(grid.nt - 1):
        L_next = L_prev if const_L else L_at(n + 1)
        Li_next = L_next[interior][:, interior]
        Li_prev = L_prev[interior][:, interior]
        if lu is None or not const_L:
            try:
                lu = spla.splu((I - 0.5 * dt * Li_next).tocsc())
            except RuntimeError as exc:
                raise ForwardSolveError(f"linear solve failed at step {n}: {exc}", step=n) from exc
        u = U[n]
        f_old = rhs_at(n, u)
        base = u[interior] + 0.5 * dt * (Li_prev @ u[interior]) + 0.5 * dt * f_old[interior]
        # predictor with lagged right-hand side, then one corrector
        pred = np.zeros(ns)
        pred[interior] = lu.solve(base + 0.5 * dt * rhs_at(n + 1, u)[interior])
        new = np.zeros(ns)
        new[interior] = lu.solve(base + 0.5 * dt * rhs_at(n + 1, pred)[interior])
        if not np.all(np.isfinite(new)):
            raise ForwardSolveError(f"non-finite solution at step {n + 1}", step=n + 1)
        U[n + 1] = new
        L_prev = L_next
    return Field(grid, U.reshape(grid.shape))


def extract_final(u: Field) -> SpaceField:
    return u.level(u.grid.nt - 1)


def insert_final(u: Field, g: SpaceField) -> Field:
    out = u.copy()
    out.values[-1] = g.values
    return out


def add_noise(g: SpaceField, delta: float, seed: int) -> SpaceField:
    """``g`` plus interior Gaussian noise scaled to L2(Omega) norm exactly ``delta``."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0:
        return g.copy()
    grid = g.grid
    rng = np.random.default_rng(seed)
    noise = np.zeros(grid.space_shape)
    mask = ~grid.space_boundary_mask
    noise[mask] = rng.standard_normal(int(mask.sum()))
    nrm = discrete_norm(SpaceField(grid, noise), NormKind.l2_space())
    noise *= delta / nrm
    return SpaceField(grid, g.values + noise)


def restrict(u: Field, coarse: Grid) -> Field:
    """Injection of a nested fine-grid field onto ``coarse``."""
    fine = u.grid
    ft = (fine.nt - 1) // (coarse.nt - 1)
    fx = [(nf - 1) // (nc - 1) for nf, nc in zip(fine.nx, coarse.nx)]
    if ft * (coarse.nt - 1) != fine.nt - 1 or any(
        f * (nc - 1) != nf - 1 for f, nc, nf in zip(fx, coarse.nx, fine.nx)
    ):
        raise ValueError("grids are not nested")
    sl = (slice(None, None, ft), *(slice(None, None, f) for f in fx))
    return Field(coarse, u.values[sl])


def generate_data(problem: ForwardProblem, grid: Grid, refine: int = 2) -> Field:
    """Ground truth on ``grid`` from a forward solve on a ``refine``-times finer grid."""
    if refine < 1:
        raise ValueError("refine must be >= 1")
    if refine == 1:
        return solve_forward(problem, grid)
    fine = build_grid(grid.spec.refined(refine))
    return restrict(solve_forward(problem, fine), grid)


# ---------------------------------------------------------------------------
# caching format: b"RVTF" | uint32 header length | JSON header | float64 LE values

_MAGIC = b"RVTF"


def save_field(path, u: Field) -> None:
    header = json.dumps({"grid": u.grid.spec.to_dict(), "order": "time-major"},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(u.flat, dtype="<f8").tobytes())


def load_field(path) -> Field:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a field file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        values = np.frombuffer(fh.read(), dtype="<f8")
    g = header["grid"]
    spec = GridSpec(g["spatial_dim"], tuple(g["box_lengths"]), tuple(g["nx"]), g["nt"], g["T"])
    return Field(build_grid(spec), values.copy())
