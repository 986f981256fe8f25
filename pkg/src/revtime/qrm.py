"""Quasi-reversibility for the linear problem: least squares on the PDE residual
plus an ``H^k(Q_T)`` penalty, over grid functions vanishing on ``S_T`` and at
``t = T``.

The functional is discretized first.  With ``B`` the residual operator on
the free unknowns (trapezoidal weights folded in as square roots),

    J(v) = ||B v - q||^2 + alpha v^T R v,

and the minimizer solves the normal equations ``(B^T B + alpha R) v = B^T q``
exactly up to the linear solver tolerance.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .carleman import c_exponent, nu_of_delta, rate_bound, DeltaTooLargeError
from .grid import Field, Grid, NormKind, discrete_norm, gram_matrix
from .linalg import ConvergenceError, conjugate_gradient
from .model import A_matrix, L_matrix, LiftedProblem, lift

__all__ = [
    "QrmConfig",
    "QrmHandle",
    "QrmSolution",
    "RateRow",
    "RateTable",
    "assemble_qrm",
    "minimize_qrm",
    "linear_residual_operator",
    "run_noise_ladder",
    "DIRECT_DOF_LIMIT",
]

DIRECT_DOF_LIMIT = 10_000


@dataclass
class QrmConfig:
    alpha: float = 1e-6
    cg_tol: float = 1e-10
    cg_max_iter: int = 50_000
    alpha_rule: str = "manual"
    solver: str = "cg"
    norm_order: int = 2
    jacobi: bool = True

    def __post_init__(self):
        if not (0 < self.alpha < 1):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not (0 < self.cg_tol <= 1e-2):
            raise ValueError(f"cg_tol must lie in (0, 1e-2], got {self.cg_tol}")
        if self.cg_max_iter < 1:
            raise ValueError("cg_max_iter must be positive")
        if self.alpha_rule not in ("manual", "delta_squared"):
            raise ValueError(f"unknown alpha rule {self.alpha_rule!r}")
        if self.solver not in ("cg", "direct"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.norm_order not in (2, 3, 4):
            raise ValueError("norm_order must be 2, 3 or 4")

    def alpha_for(self, delta: float) -> float:
        if self.alpha_rule == "delta_squared":
            if not (0 < delta < 1):
                raise ValueError("the delta_squared rule needs delta in (0, 1)")
            return delta**2
        return self.alpha


def linear_residual_operator(problem: LiftedProblem) -> sp.csr_matrix:
    """Full-grid matrix of ``v -> v_t - Lv - Av - N_lin v`` (linear problems only)."""
    if not problem.is_linear:
        raise ValueError(f"QRM needs a linear right-hand side, got nonlinearity {problem.F.name!r}")
    grid = problem.grid
    K = grid.derivative_matrix((1,) + (0,) * grid.dim) - L_matrix(problem.coeffs, grid) \
        - A_matrix(problem.coeffs, grid)
    mesh = [m.ravel() for m in grid.mesh]
    zg = np.zeros((grid.dim, grid.size))
    zu = np.zeros(grid.size)
    dg = problem.F.d_grad(zg, zu, *mesh)
    du = problem.F.d_u(zg, zu, *mesh)
    if np.any(du):
        K = K - sp.diags(du)
    for j, D in enumerate(grid.gradient_matrices()):
        if np.any(dg[j]):
            K = K - sp.diags(dg[j]) @ D
    return K.tocsr()


@dataclass
class QrmHandle:
    """Assembled quadratic ``J(v) = ||B v - q||^2 + alpha v^T R v`` over free DOFs."""

    problem: LiftedProblem
    alpha: float
    B: sp.csr_matrix
    qw: np.ndarray
    R: sp.csr_matrix
    time_weight: np.ndarray
    norm_order: int
    _normal: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def grid(self) -> Grid:
        return self.problem.grid

    @property
    def n_free(self) -> int:
        return self.B.shape[1]

    def objective(self, v) -> float:
        vf = self.to_free(v)
        r = self.B @ vf - self.qw
        return float(r @ r + self.alpha * (vf @ (self.R @ vf)))

    def gradient(self, v) -> np.ndarray:
        vf = self.to_free(v)
        return 2.0 * (self.normal_matrix @ vf - self.normal_rhs)

    @property
    def normal_matrix(self) -> sp.csr_matrix:
        if self._normal is None:
            M = (self.B.T @ self.B + self.alpha * self.R).tocsr()
            self._normal = (0.5 * (M + M.T)).tocsr()
        return self._normal

    @property
    def normal_rhs(self) -> np.ndarray:
        return self.B.T @ self.qw

    def expand(self, v_free: np.ndarray) -> Field:
        return Field(self.grid, self.grid.prolongation @ v_free)

    def to_free(self, v) -> np.ndarray:
        if isinstance(v, Field):
            return free_values(v)
        return np.asarray(v, dtype=float)


def free_values(v: Field, tol: float = 0.0) -> np.ndarray:
    """Free-DOF vector of ``v``; rejects fields that violate the constraints."""
    grid = v.grid
    fixed = ~grid.free_mask
    worst = float(np.max(np.abs(v.values[fixed]))) if fixed.any() else 0.0
    if worst > tol:
        raise ValueError(f"field violates v|S_T = 0, v(., T) = 0 (max |v| there = {worst:.3e})")
    return v.flat[grid.free_index].copy()


def assemble_qrm(problem: LiftedProblem, config: QrmConfig, alpha: float | None = None,
                 time_weight=None) -> QrmHandle:
    """Assemble ``B``, ``q`` and the Gram matrix ``R`` on the free unknowns.

    ``time_weight`` (one value per time level, default all ones) multiplies the
    residual integrand, which reproduces a Carleman-weighted functional.
    """
    grid = problem.grid
    alpha = config.alpha if alpha is None else float(alpha)
    if not (0 < alpha < 1):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if problem.q is None:
        raise ValueError("QRM needs the linear source q; the lifted problem is nonlinear")
    K = linear_residual_operator(problem)
    tw = np.ones(grid.nt) if time_weight is None else np.asarray(time_weight, dtype=float)
    if tw.shape != (grid.nt,) or np.any(tw < 0):
        raise ValueError("time_weight needs one non-negative value per time level")
    rows = np.flatnonzero(grid.interior_mask.ravel())
    w = (grid.weights * tw[(slice(None),) + (None,) * grid.dim]).ravel()[rows]
    sw = np.sqrt(w)
    P = grid.prolongation
    B = (sp.diags(sw) @ K[rows] @ P).tocsr()
    qw = sw * problem.q.flat[rows]
    R = (P.T @ gram_matrix(grid, NormKind.hk(config.norm_order)) @ P).tocsr()
    return QrmHandle(problem, alpha, B, qw, R, tw, config.norm_order)


@dataclass
class QrmSolution:
    v_min: Field
    u_rec: Field
    iterations: int
    residual_history: list
    J_value: float
    identity_residual: float
    h2_norm: float
    solver: str
    errors: dict = field(default_factory=dict)

    def error_h10(self, u_true: Field, tau: float) -> float:
        return discrete_norm(self.u_rec - u_true, NormKind.h10(tau))


def minimize_qrm(handle: QrmHandle, config: QrmConfig, x0=None, solver: str | None = None) -> QrmSolution:
    """Solve the normal equations; records the relative normal-equation residual."""
    solver = solver or config.solver
    A = handle.normal_matrix
    b = handle.normal_rhs
    n = handle.n_free
    if solver == "direct":
        if n > DIRECT_DOF_LIMIT:
            raise ValueError(f"direct solve limited to {DIRECT_DOF_LIMIT} unknowns, got {n}")
        x = spla.spsolve(A.tocsc(), b) if np.any(b) else np.zeros(n)
        iters, hist = 0, []
    else:
        start = None if x0 is None else handle.to_free(x0)
        diag = A.diagonal()
        res = conjugate_gradient(A, b, start, tol=config.cg_tol, max_iter=config.cg_max_iter,
                                 M_inv_diag=(1.0 / diag) if config.jacobi else None)
        x, iters, hist = res.x, res.iterations, res.history
    bn = float(np.linalg.norm(b))
    ident = float(np.linalg.norm(A @ x - b)) / bn if bn > 0 else float(np.linalg.norm(A @ x))
    v = handle.expand(x)
    return QrmSolution(
        v_min=v,
        u_rec=handle.problem.reconstruct(v),
        iterations=iters,
        residual_history=hist,
        J_value=handle.objective(x),
        identity_residual=ident,
        h2_norm=discrete_norm(v, NormKind.hk(handle.norm_order)),
        solver=solver,
    )


# ---------------------------------------------------------------------------
# noise ladders


@dataclass
class RateRow:
    delta: float
    nu_delta: float
    alpha: float
    tau: float
    c: float
    error_h10: float
    bound: float
    implied_C: float
    seed: int
    cg_iters: int = 0


@dataclass
class RateTable:
    rows: list
    baseline: dict | None = None
    failures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    COLUMNS = ("delta", "alpha", "nu_delta", "tau", "c", "error_h10", "bound", "implied_C",
               "cg_iters", "seed")

    def sorted(self) -> "RateTable":
        rows = sorted(self.rows, key=lambda r: (-r.delta, r.tau, r.seed))
        return RateTable(rows, self.baseline, self.failures, self.meta)

    def for_tau(self, tau: float) -> "RateTable":
        return RateTable([r for r in self.rows if math.isclose(r.tau, tau)], self.baseline,
                         self.failures, self.meta)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.sorted().rows:
            w.writerow([_fmt(getattr(r, c)) for c in self.COLUMNS])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def run_noise_ladder(coeffs, F, u_true: Field, delta_ladder, config: QrmConfig, seeds=(0,),
                     taus=None, k_base: float = 2.0, noise_fn=None) -> RateTable:
    """QRM error against the rate bound on a ladder of noise levels.

    Data ``g`` is the final level of ``u_true`` perturbed by ``add_noise`` with
    exact L2 norm ``delta``.  Errors are ``||u_rec - u_true||`` in
    ``H^{1,0}(Q_{T tau})``; ``taus`` defaults to ``[T/4]``.
    """
    from .forward import add_noise, extract_final

    deltas = [float(d) for d in delta_ladder]
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta ladder must be strictly decreasing")
    grid = u_true.grid
    T = grid.T
    taus = [T / 4] if taus is None else list(taus)
    noise_fn = noise_fn or add_noise
    g_true = extract_final(u_true)
    rows, failures = [], []
    for delta in deltas:
        alpha = config.alpha_for(delta) if delta > 0 else config.alpha
        try:
            nu = nu_of_delta(delta, k_base, T)
        except DeltaTooLargeError:
            nu = float("nan")
        for seed in seeds:
            g = noise_fn(g_true, delta, seed)
            problem = lift(coeffs, F, g)
            try:
                handle = assemble_qrm(problem, config, alpha=alpha)
                sol = minimize_qrm(handle, config)
            except (ConvergenceError, RuntimeError, ValueError) as exc:
                failures.append({"delta": delta, "seed": seed, "error": str(exc)})
                continue
            for tau in taus:
                c = c_exponent(tau, T)
                err = sol.error_h10(u_true, tau)
                bound = rate_bound(delta, k_base, c)
                rows.append(RateRow(delta, nu, alpha, tau, c, err, bound, err / bound, seed,
                                    sol.iterations))
    baseline = None
    if deltas:
        alpha0 = config.alpha_for(deltas[-1])
        problem = lift(coeffs, F, g_true)
        sol = minimize_qrm(assemble_qrm(problem, config, alpha=alpha0), config)
        baseline = {"alpha": alpha0, "errors": {tau: sol.error_h10(u_true, tau) for tau in taus}}
    return RateTable(rows, baseline, failures).sorted()
