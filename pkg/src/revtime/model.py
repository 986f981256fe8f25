"""Coefficients, operators and nonlinearities of ``u_t = Lu + Au + p + N(grad u, u, x, t)``.

``L`` is the principal part ``sum a_ij u_{x_i x_j}``, ``A`` the linear
lower-order part ``sum b_j u_{x_j} + c u`` and ``N`` an optional globally
Lipschitz nonlinearity.  Everything to the right of ``Lu`` together is the
right-hand side ``F`` of the quasilinear equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .grid import Field, Grid, SpaceField, discrete_norm, NormKind

__all__ = [
    "CoefficientSet",
    "Nonlinearity",
    "LiftedProblem",
    "EllipticityReport",
    "EllipticityError",
    "BoundaryCompatibilityError",
    "coefficient_preset",
    "nonlinearity_preset",
    "COEFFICIENT_PRESETS",
    "NONLINEARITY_PRESETS",
    "apply_L",
    "apply_A",
    "L_matrix",
    "A_matrix",
    "check_ellipticity",
    "estimate_lipschitz",
    "lift",
]


class EllipticityError(ValueError):
    pass


class BoundaryCompatibilityError(ValueError):
    pass


# coefficient callables take (t, x1, ..., xd) arrays of one common shape
CoefFn = Callable[..., np.ndarray]


@dataclass
class CoefficientSet:
    """Coefficients ``a_ij, b_j, c, p`` and the ellipticity bounds ``mu1 <= mu2``.

    ``a(t, *x)`` returns shape ``(d, d, *s)``, ``b`` returns ``(d, *s)``,
    ``c`` and ``p`` return ``s`` for coordinate arrays of shape ``s``.
    """

    dim: int
    a: CoefFn
    b: CoefFn
    c: CoefFn
    p: CoefFn
    mu1: float
    mu2: float
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.mu1 <= self.mu2):
            raise ValueError(f"need 0 < mu1 <= mu2, got mu1={self.mu1}, mu2={self.mu2}")

    def sample(self, grid: Grid) -> dict[str, np.ndarray]:
        """Coefficient values at every node of ``grid`` (cached on the grid)."""
        key = ("coef", id(self))
        cached = grid._ops.get(key)
        if cached is not None and cached[0] is self:
            return cached[1]
        mesh = grid.mesh
        shape = grid.shape
        d = self.dim
        out = {
            "a": np.broadcast_to(self.a(*mesh), (d, d, *shape)).astype(float),
            "b": np.broadcast_to(self.b(*mesh), (d, *shape)).astype(float),
            "c": np.broadcast_to(self.c(*mesh), shape).astype(float),
            "p": np.broadcast_to(self.p(*mesh), shape).astype(float),
        }
        if not np.allclose(out["a"], np.swapaxes(out["a"], 0, 1), rtol=0, atol=1e-14):
            raise ValueError("a_ij is not symmetric at the sampled nodes")
        grid._ops[key] = (self, out)
        return out

    @property
    def is_constant_in_time(self) -> bool:
        return bool(self.params.get("time_independent", False))


def _const(value):
    def fn(t, *x):
        return np.full(np.shape(t), float(value))
    return fn


def _identity_a(dim, scale_fn):
    def fn(t, *x):
        s = scale_fn(t, *x)
        out = np.zeros((dim, dim, *np.shape(t)))
        for i in range(dim):
            out[i, i] = s
        return out
    return fn


def _const_vec(dim, values):
    values = np.broadcast_to(np.asarray(values, dtype=float), (dim,))

    def fn(t, *x):
        return np.stack([np.full(np.shape(t), v) for v in values])
    return fn


def coefficient_preset(name: str, dim: int = 1, **params) -> CoefficientSet:
    """Named coefficient sets.

    ``heat``            a = kappa*I, b = 0, c = 0, p = 0
    ``constant``        a = kappa*I, b, c, p constants
    ``trigonometric``   a = (2 + sin(x1*t)) I, optional b, c; mu1 = 1, mu2 = 3
    ``affine_t``        a = (a0 + a1*t) I on t in [0, T]
    ``drift``           a = I, b = (t, ...), c = x1 (variable lower-order terms)
    """
    if dim not in (1, 2):
        raise ValueError("dim must be 1 or 2")
    if name == "heat":
        kappa = float(params.get("kappa", 1.0))
        return CoefficientSet(
            dim, _identity_a(dim, _const(kappa)), _const_vec(dim, 0.0), _const(0.0), _const(0.0),
            kappa, kappa, name, {"kappa": kappa, "time_independent": True},
        )
    if name == "constant":
        kappa = float(params.get("kappa", 1.0))
        b = params.get("b", 0.0)
        c = float(params.get("c", 0.0))
        p = float(params.get("p", 0.0))
        return CoefficientSet(
            dim, _identity_a(dim, _const(kappa)), _const_vec(dim, b), _const(c), _const(p),
            kappa, kappa, name, {"kappa": kappa, "b": b, "c": c, "p": p, "time_independent": True},
        )
    if name == "trigonometric":
        b = params.get("b", 0.0)
        c = float(params.get("c", 0.0))
        return CoefficientSet(
            dim, _identity_a(dim, lambda t, *x: 2.0 + np.sin(x[0] * t)), _const_vec(dim, b),
            _const(c), _const(0.0), 1.0, 3.0, name, {"b": b, "c": c},
        )
    if name == "affine_t":
        a0 = float(params.get("a0", 1.0))
        a1 = float(params.get("a1", 1.0))
        T = float(params.get("T", 1.0))
        if a0 <= 0 or a0 + a1 * T <= 0:
            raise ValueError("affine_t coefficient must stay positive on [0, T]")
        lo, hi = sorted((a0, a0 + a1 * T))
        return CoefficientSet(
            dim, _identity_a(dim, lambda t, *x: a0 + a1 * t), _const_vec(dim, 0.0), _const(0.0),
            _const(0.0), lo, hi, name, {"a0": a0, "a1": a1, "T": T},
        )
    if name == "drift":
        def b(t, *x):
            return np.stack([np.asarray(t, dtype=float)] * dim)

        return CoefficientSet(
            dim, _identity_a(dim, _const(1.0)), b, lambda t, *x: np.asarray(x[0], dtype=float),
            _const(0.0), 1.0, 1.0, name, {},
        )
    raise KeyError(f"unknown coefficient preset {name!r}; choose from {COEFFICIENT_PRESETS}")


COEFFICIENT_PRESETS = ("heat", "constant", "trigonometric", "affine_t", "drift")


@dataclass
class Nonlinearity:
    """``N(grad u, u, x, t)`` with its partial derivatives and Lipschitz constant.

    ``value``, ``d_grad`` and ``d_u`` take ``grad`` of shape ``(d, m)``, ``u`` of
    shape ``(m,)`` and coordinate arrays ``t, x1, ...`` of shape ``(m,)``.
    ``d_grad`` returns ``(d, m)``.
    """

    name: str
    lipschitz_C: float
    value: Callable[..., np.ndarray]
    d_grad: Callable[..., np.ndarray]
    d_u: Callable[..., np.ndarray]
    is_linear: bool = False
    params: dict = field(default_factory=dict)

    def __call__(self, grad, u, t, *x):
        return self.value(grad, u, t, *x)


def nonlinearity_preset(name: str, **params) -> Nonlinearity:
    """Globally Lipschitz presets.

    ``zero``        N = 0
    ``linear``      N = b . grad u + c u        (C = |(b, c)|)
    ``sin``         N = scale * sin(u)          (C = |scale|)
    ``rational``    N = scale * u / (1 + u^2)   (C = |scale|)
    ``gradnorm``    N = scale * sqrt(|grad u|^2 + eps^2)   (C = |scale|)
    """
    zeros_like_u = lambda grad, u, t, *x: np.zeros_like(u, dtype=float)
    zeros_like_g = lambda grad, u, t, *x: np.zeros_like(grad, dtype=float)
    if name == "zero":
        return Nonlinearity("zero", 0.0, zeros_like_u, zeros_like_g, zeros_like_u, True, {})
    if name == "linear":
        b = np.atleast_1d(np.asarray(params.get("b", [0.0]), dtype=float))
        c = float(params.get("c", 0.0))

        def coef(d):
            if b.size > d and np.any(b[d:]):
                raise ValueError(f"linear preset has {b.size} drift entries for a {d}-D gradient")
            return np.pad(b, (0, max(d - b.size, 0)))[:d]

        def value(grad, u, t, *x):
            return np.tensordot(coef(grad.shape[0]), grad, axes=1) + c * u

        def d_grad(grad, u, t, *x):
            return np.broadcast_to(coef(grad.shape[0])[:, None], grad.shape).copy()

        def d_u(grad, u, t, *x):
            return np.full_like(u, c, dtype=float)

        C = float(np.sqrt(np.sum(b**2) + c**2))
        return Nonlinearity("linear", C, value, d_grad, d_u, True, {"b": b.tolist(), "c": c})
    if name == "sin":
        s = float(params.get("scale", 1.0))
        return Nonlinearity(
            "sin", abs(s),
            lambda grad, u, t, *x: s * np.sin(u),
            zeros_like_g,
            lambda grad, u, t, *x: s * np.cos(u),
            False, {"scale": s},
        )
    if name == "rational":
        s = float(params.get("scale", 1.0))
        return Nonlinearity(
            "rational", abs(s),
            lambda grad, u, t, *x: s * u / (1.0 + u**2),
            zeros_like_g,
            lambda grad, u, t, *x: s * (1.0 - u**2) / (1.0 + u**2) ** 2,
            False, {"scale": s},
        )
    if name == "gradnorm":
        s = float(params.get("scale", 0.5))
        eps = float(params.get("eps", 0.1))
        if eps <= 0:
            raise ValueError("gradnorm needs eps > 0 for smoothness")

        def value(grad, u, t, *x):
            return s * np.sqrt(np.sum(grad**2, axis=0) + eps**2)

        def d_grad(grad, u, t, *x):
            return s * grad / np.sqrt(np.sum(grad**2, axis=0) + eps**2)

        return Nonlinearity("gradnorm", abs(s), value, d_grad, zeros_like_u, False,
                            {"scale": s, "eps": eps})
    raise KeyError(f"unknown nonlinearity preset {name!r}; choose from {NONLINEARITY_PRESETS}")


NONLINEARITY_PRESETS = ("zero", "linear", "sin", "rational", "gradnorm")
QUASILINEAR_PRESETS = ("sin", "rational", "gradnorm")


# ---------------------------------------------------------------------------
# operators


def L_matrix(coeffs: CoefficientSet, grid: Grid) -> sp.csr_matrix:
    """Sparse ``Lu = sum_ij a_ij u_{x_i x_j}`` on the full space-time grid."""
    key = ("L", id(coeffs))
    hit = grid._ops.get(key)
    if hit is not None and hit[0] is coeffs:
        return hit[1]
    a = coeffs.sample(grid)["a"]
    d = grid.dim
    M = sp.csr_matrix((grid.size, grid.size))
    for i in range(d):
        for j in range(d):
            aij = a[i, j].ravel()
            if not np.any(aij):
                continue
            orders = [0] * (d + 1)
            orders[i + 1] += 1
            orders[j + 1] += 1
            M = M + sp.diags(aij) @ grid.derivative_matrix(orders)
    M = M.tocsr()
    grid._ops[key] = (coeffs, M)
    return M


def A_matrix(coeffs: CoefficientSet, grid: Grid) -> sp.csr_matrix:
    """Sparse ``Au = sum_j b_j u_{x_j} + c u`` with centered first differences."""
    key = ("A", id(coeffs))
    hit = grid._ops.get(key)
    if hit is not None and hit[0] is coeffs:
        return hit[1]
    s = coeffs.sample(grid)
    M = sp.diags(s["c"].ravel()).tocsr()
    for j, D in enumerate(grid.gradient_matrices()):
        bj = s["b"][j].ravel()
        if np.any(bj):
            M = M + sp.diags(bj) @ D
    M = M.tocsr()
    grid._ops[key] = (coeffs, M)
    return M


def apply_L(coeffs: CoefficientSet, u: Field) -> Field:
    return Field(u.grid, L_matrix(coeffs, u.grid) @ u.flat)


def apply_A(coeffs: CoefficientSet, u: Field) -> Field:
    return Field(u.grid, A_matrix(coeffs, u.grid) @ u.flat)


@dataclass
class EllipticityReport:
    min_eig: float
    max_eig: float
    passed: bool
    violations: list = field(default_factory=list)

    @property
    def pass_(self) -> bool:
        return self.passed


def check_ellipticity(coeffs: CoefficientSet, grid: Grid, samples: int = 0,
                      seed: int = 0, raise_on_fail: bool = False) -> EllipticityReport:
    """Eigenvalue range of ``a(x, t)`` over sampled nodes against ``[mu1, mu2]``.

    ``samples <= 0`` or ``>= node count`` checks every node; otherwise a seeded
    random subset is used.
    """
    a = coeffs.sample(grid)["a"]
    d = grid.dim
    mats = np.moveaxis(a.reshape(d, d, -1), -1, 0)
    if 0 < samples < mats.shape[0]:
        idx = np.sort(np.random.default_rng(seed).choice(mats.shape[0], samples, replace=False))
    else:
        idx = np.arange(mats.shape[0])
    eig = np.linalg.eigvalsh(mats[idx])
    lo, hi = eig[:, 0], eig[:, -1]
    tol = 1e-12 * max(1.0, coeffs.mu2)
    bad = np.flatnonzero((lo < coeffs.mu1 - tol) | (hi > coeffs.mu2 + tol))
    violations = []
    for k in bad[:20]:
        node = np.unravel_index(idx[k], grid.shape)
        coords = (grid.t[node[0]], *(grid.x[i][node[i + 1]] for i in range(d)))
        violations.append({"node": tuple(int(v) for v in node), "t_x": coords,
                           "eig": (float(lo[k]), float(hi[k]))})
    rep = EllipticityReport(float(lo.min()), float(hi.max()), bad.size == 0, violations)
    if raise_on_fail and not rep.passed:
        v = violations[0]
        raise EllipticityError(
            f"ellipticity violated at {bad.size} nodes, first at node {v['node']} "
            f"(t, x) = {v['t_x']} with eigenvalues {v['eig']} outside "
            f"[{coeffs.mu1}, {coeffs.mu2}]"
        )
    return rep


def estimate_lipschitz(F: Nonlinearity, domain_box, trials: int = 1000, seed: int = 0,
                       dim: int | None = None) -> float:
    """Largest sampled difference quotient ``|F(y1) - F(y2)| / |y1 - y2|``.

    ``domain_box`` lists ``(lo, hi)`` bounds for ``(u_x1, ..., u_xd, u)``;
    optionally two more for ``(t, x1..xd)`` are ignored by presets that do
    not depend on position.  Half of the pairs are drawn independently, the
    other half as close pairs with log-uniform separation so that local
    slopes are probed as well.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials")
    box = np.asarray(domain_box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError("domain_box must be a sequence of (lo, hi) pairs")
    d = box.shape[0] - 1 if dim is None else dim
    if d < 1 or box.shape[0] < d + 1:
        raise ValueError("domain_box needs bounds for the gradient and the value")
    rng = np.random.default_rng(seed)
    lo, hi = box[: d + 1, 0], box[: d + 1, 1]
    span = hi - lo
    y1 = lo + span * rng.random((trials, d + 1))
    n_far = trials // 2
    y2 = np.empty_like(y1)
    y2[:n_far] = lo + span * rng.random((n_far, d + 1))
    n_near = trials - n_far
    direction = rng.standard_normal((n_near, d + 1)) * (span > 0)
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    scale = 10.0 ** rng.uniform(-6, -1, size=(n_near, 1)) * max(float(span.max()), 1e-12)
    y2[n_far:] = np.clip(y1[n_far:] + scale * direction, lo, hi)
    t = np.zeros(trials)
    xs = [np.zeros(trials)] * d

    def ev(y):
        return F.value(y[:, :d].T, y[:, d], t, *xs)

    num = np.abs(ev(y1) - ev(y2))
    den = np.linalg.norm(y1 - y2, axis=1)
    ok = den > 0
    if not np.any(ok):
        return 0.0
    return float(np.max(num[ok] / den[ok]))


# ---------------------------------------------------------------------------
# lifting v = u - g


@dataclass
class LiftedProblem:
    """Homogeneous-final-data problem for ``v = u - g``.

    ``v_t = Lv + G(grad v, v, x, t)`` with ``G = Lg + F(grad v + grad g, v + g)``
    and ``F = A(.) + p + N``.  In the linear case the equation reads
    ``v_t = Lv + Av + N_lin v + q`` with ``q = Lg + Ag + p + N(grad g, g)``.
    """

    grid: Grid
    coeffs: CoefficientSet
    F: Nonlinearity
    g: SpaceField
    Lg: Field
    q: Field | None

    @property
    def is_linear(self) -> bool:
        return self.F.is_linear

    def reconstruct(self, v: Field) -> Field:
        return v + self.g.broadcast()

    def v_of(self, u: Field) -> Field:
        return u - self.g.broadcast()

    @property
    def _g_full(self) -> np.ndarray:
        return np.broadcast_to(self.g.values, self.grid.shape).ravel()

    def total_state(self, v_flat: np.ndarray):
        """``(grad(v+g), v+g)`` at all nodes; gradient has shape ``(d, n)``."""
        u = v_flat + self._g_full
        grad = np.stack([D @ u for D in self.grid.gradient_matrices()])
        return grad, u

    def G(self, v: Field | np.ndarray) -> np.ndarray:
        """Flat ``G(grad v, v, x, t)`` at every node."""
        vf = v.flat if isinstance(v, Field) else v
        grad, u = self.total_state(vf)
        s = self.coeffs.sample(self.grid)
        mesh = [m.ravel() for m in self.grid.mesh]
        lower = np.einsum("jn,jn->n", s["b"].reshape(self.grid.dim, -1), grad) \
            + s["c"].ravel() * u + s["p"].ravel()
        return self.Lg.flat + lower + self.F.value(grad, u, *mesh)

    def G_partials(self, v: Field | np.ndarray):
        """``(dG/d grad v, dG/dv)`` at every node, shapes ``(d, n)`` and ``(n,)``."""
        vf = v.flat if isinstance(v, Field) else v
        grad, u = self.total_state(vf)
        s = self.coeffs.sample(self.grid)
        mesh = [m.ravel() for m in self.grid.mesh]
        dg = s["b"].reshape(self.grid.dim, -1) + self.F.d_grad(grad, u, *mesh)
        du = s["c"].ravel() + self.F.d_u(grad, u, *mesh)
        return dg, du


def check_boundary_compatible(g: SpaceField, rel_tol: float = 1e-12) -> float:
    """Max ``|g|`` on the boundary; raises unless it is below ``rel_tol * ||g||``."""
    grid = g.grid
    bnd = float(np.max(np.abs(g.values[grid.space_boundary_mask])))
    scale = max(float(np.max(np.abs(g.values))), discrete_norm(g, NormKind.l2_space()))
    if bnd > rel_tol * scale and bnd > 0:
        raise BoundaryCompatibilityError(
            f"final data must vanish on the boundary: max |g| there is {bnd:.3e} "
            f"(tolerance {rel_tol * scale:.3e})"
        )
    return bnd


def lift(coeffs: CoefficientSet, F: Nonlinearity, g: SpaceField) -> LiftedProblem:
    check_boundary_compatible(g)
    grid = g.grid
    gf = g.broadcast()
    Lg = apply_L(coeffs, gf)
    q = None
    if F.is_linear:
        mesh = [m.ravel() for m in grid.mesh]
        grad = np.stack([D @ gf.flat for D in grid.gradient_matrices()])
        s = coeffs.sample(grid)
        q_vals = Lg.flat + A_matrix(coeffs, grid) @ gf.flat + s["p"].ravel() \
            + F.value(grad, gf.flat, *mesh)
        q = Field(grid, q_vals)
    return LiftedProblem(grid, coeffs, F, g, Lg, q)
