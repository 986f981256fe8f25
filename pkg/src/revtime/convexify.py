"""Carleman-weighted Tikhonov functional for the quasilinear problem and its
minimization by gradient projection onto a ball of ``H^k(Q_T)``.

The weight is normalized at ``t = T`` so that no factor exceeds one.  With
``s = exp(2 (tau+1)^nu - 2 (T+1)^nu)`` the functional evaluated here is

    I(v) = sum_nodes w * exp(2 (t+1)^nu - 2 (T+1)^nu) * r(v)^2 + alpha * s * ||v||_k^2,
    r(v) = v_t - Lv - G(grad v, v, x, t),

which is ``s`` times the functional normalized at ``tau``.  Multiplying by a
positive constant leaves minimizers, projected iterates (up to the step
size) and the sign of every convexity defect unchanged.  ``alpha * s`` is
called ``alpha_eff`` throughout.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.linalg as spla

from .carleman import (CarlemanParams, DeltaTooLargeError, c_exponent, check_overflow, cwf_log,
                       nu_of_delta, rate_bound)
from .grid import Field, Grid, NormKind, discrete_norm, gram_matrix
from .forward import add_noise, extract_final
from .model import L_matrix, LiftedProblem, lift
from .qrm import RateRow, RateTable, free_values

__all__ = [
    "ConvexConfig",
    "ConvexSolution",
    "CarlemanFunctional",
    "ProbeReport",
    "DivergenceError",
    "AlphaClippedWarning",
    "eval_I",
    "grad_I",
    "project_ball",
    "gradient_projection",
    "convexity_probe",
    "random_ball_field",
    "alpha_rule",
    "fd_gradient_check",
    "probe_pairs",
    "run_accuracy_ladder",
    "fit_theta",
]

log = logging.getLogger(__name__)

# functional values are compared up to this relative roundoff allowance
ROUNDOFF_REL = 1e-12


class DivergenceError(RuntimeError):
    pass


class AlphaClippedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ConvexConfig:
    alpha: float = 0.5
    nu: float = 2.0
    tau: float = 0.5
    R: float = 10.0
    norm_order: int = 2
    gamma: float = 0.1
    max_iter: int = 20_000
    stop_tol: float = 1e-8
    C2_hat: float | None = None

    def __post_init__(self):
        if not (0 < self.alpha < 1):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.nu < 1:
            raise ValueError(f"nu must be >= 1, got {self.nu}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.R <= 0:
            raise ValueError("R must be positive")
        if self.norm_order not in (2, 3, 4):
            raise ValueError("norm_order must be 2, 3 or 4")
        if not (0 < self.gamma < 1):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.stop_tol <= 0 or self.max_iter < 1:
            raise ValueError("stop_tol and max_iter must be positive")
        if self.C2_hat is not None and self.C2_hat <= 0:
            raise ValueError("C2_hat must be positive")

    def log_scale(self, T: float) -> float:
        """``log s = 2 (tau+1)^nu - 2 (T+1)^nu``."""
        return float(cwf_log(self.tau, self.nu) - cwf_log(T, self.nu))

    def alpha_eff(self, T: float) -> float:
        return self.alpha * math.exp(self.log_scale(T))


class CarlemanFunctional:
    """Discrete ``I`` and its exact gradient on the free unknowns of ``problem``."""

    def __init__(self, problem: LiftedProblem, cfg: ConvexConfig):
        grid = problem.grid
        if not (0 < cfg.tau < grid.T):
            raise ValueError(f"tau must lie in (0, T), got {cfg.tau}")
        check_overflow(cfg.nu, grid.T)
        self.problem = problem
        self.cfg = cfg
        self.grid = grid
        self.alpha_eff = cfg.alpha_eff(grid.T)
        self.scale = math.exp(cfg.log_scale(grid.T))
        self.K0 = (grid.derivative_matrix((1,) + (0,) * grid.dim)
                   - L_matrix(problem.coeffs, grid)).tocsr()
        self.grads = grid.gradient_matrices()
        self.rows = np.flatnonzero(grid.interior_mask.ravel())
        tw = np.exp(cwf_log(grid.t, cfg.nu) - cwf_log(grid.T, cfg.nu))
        self.time_weight = tw
        self.w = (grid.weights * tw[(slice(None),) + (None,) * grid.dim]).ravel()[self.rows]
        self.P = grid.prolongation
        self.R = (self.P.T @ gram_matrix(grid, NormKind.hk(cfg.norm_order)) @ self.P).tocsr()
        self._R_lu = None

    @property
    def n_free(self) -> int:
        return self.P.shape[1]

    # -- pieces ----------------------------------------------------------
    def residual(self, vf: np.ndarray) -> np.ndarray:
        u = self.P @ vf
        return (self.K0 @ u - self.problem.G(u))[self.rows]

    def value(self, vf: np.ndarray) -> float:
        r = self.residual(vf)
        return float(np.sum(self.w * r * r) + self.alpha_eff * (vf @ (self.R @ vf)))

    def jacobian_transpose_apply(self, vf: np.ndarray, s_rows: np.ndarray) -> np.ndarray:
        """``J(v)^T s`` on free DOFs, ``J`` the residual Jacobian restricted to rows."""
        u = self.P @ vf
        dg, du = self.problem.G_partials(u)
        s = np.zeros(self.grid.size)
        s[self.rows] = s_rows
        y = self.K0.T @ s - du * s
        for j, D in enumerate(self.grads):
            y -= D.T @ (dg[j] * s)
        return self.P.T @ y

    def jacobian_apply(self, vf: np.ndarray, h: np.ndarray) -> np.ndarray:
        u = self.P @ vf
        hu = self.P @ h
        dg, du = self.problem.G_partials(u)
        y = self.K0 @ hu - du * hu
        for j, D in enumerate(self.grads):
            y -= dg[j] * (D @ hu)
        return y[self.rows]

    def gradient(self, vf: np.ndarray) -> np.ndarray:
        r = self.residual(vf)
        return 2.0 * self.jacobian_transpose_apply(vf, self.w * r) + 2.0 * self.alpha_eff * (self.R @ vf)

    def norm(self, vf: np.ndarray) -> float:
        return math.sqrt(max(float(vf @ (self.R @ vf)), 0.0))

    def riesz(self, g: np.ndarray) -> np.ndarray:
        """Representer of the linear form ``g`` in the discrete ``H^k`` inner product."""
        if self._R_lu is None:
            self._R_lu = spla.splu(self.R.tocsc())
        return self._R_lu.solve(g)

    def defect(self, v1: np.ndarray, v2: np.ndarray) -> float:
        """``I(v2) - I(v1) - <I'(v1), v2 - v1>`` evaluated without cancellation."""
        h = v2 - v1
        r1 = self.residual(v1)
        dr = self.residual(v2) - r1
        lin = self.jacobian_apply(v1, h)
        res_part = float(np.sum(self.w * (dr * dr + 2.0 * r1 * (dr - lin))))
        return res_part + self.alpha_eff * float(h @ (self.R @ h))

    def to_free(self, v) -> np.ndarray:
        return free_values(v) if isinstance(v, Field) else np.asarray(v, dtype=float)

    def expand(self, vf: np.ndarray) -> Field:
        return Field(self.grid, self.P @ vf)


def eval_I(v: Field, problem: LiftedProblem, cfg: ConvexConfig) -> float:
    F = CarlemanFunctional(problem, cfg)
    return F.value(free_values(v))


def grad_I(v: Field, problem: LiftedProblem, cfg: ConvexConfig) -> Field:
    """Exact gradient of the discrete functional w.r.t. the free unknowns, as a field."""
    F = CarlemanFunctional(problem, cfg)
    return F.expand(F.gradient(free_values(v)))


def project_ball(v: Field, R: float, norm_order: int = 2) -> Field:
    """Radial projection onto the closed ball of radius ``R`` in ``H^k(Q_T)``."""
    nrm = discrete_norm(v, NormKind.hk(norm_order))
    if nrm <= R:
        return v
    return Field(v.grid, v.values * (R / nrm))


def _project_free(vf: np.ndarray, nrm: float, R: float) -> tuple[np.ndarray, bool]:
    if nrm <= R:
        return vf, False
    return vf * (R / nrm), True


@dataclass
class ConvexSolution:
    v_min: Field
    iterates_norms: list
    functional_history: list
    theta_hat: float
    iterations: int
    converged: bool
    gamma: float
    final_grad_norm: float
    projection_active: bool
    errors: dict = field(default_factory=dict)

    def error_h10(self, v_true: Field, tau: float) -> float:
        return discrete_norm(self.v_min - v_true, NormKind.h10(tau))


def fit_theta(steps, tail: int = 50, floor: float = 0.0) -> float:
    """Geometric ratio from the last ``tail`` step norms above ``floor``.

    Under geometric convergence ``||v_n - v_{n-1}||`` and ``||v_n - v_inf||``
    shrink by the same ratio, so the slope of ``log ||v_n - v_{n-1}||`` is
    used.
    """
    s = np.asarray(steps, dtype=float)
    s = s[s > floor]
    if s.size == 0:
        return 0.0
    s = s[-tail:]
    if s.size < 3:
        return float(np.exp(np.mean(np.diff(np.log(s))))) if s.size == 2 else float("nan")
    n = np.arange(s.size)
    slope = np.polyfit(n, np.log(s), 1)[0]
    return float(np.exp(slope))


def gradient_projection(v0, problem: LiftedProblem, cfg: ConvexConfig, v_true: Field | None = None,
                        functional: CarlemanFunctional | None = None, tail: int = 50) -> ConvexSolution:
    """``v_n = P_B(v_{n-1} - gamma I'(v_{n-1}))`` with ``I'`` the ``H^k`` gradient.

    Stops once ``||v_n - v_{n-1}||_k <= stop_tol * ||v_n||_k`` or after
    ``max_iter`` steps.  A step that increases ``I`` by more than
    ``ROUNDOFF_REL`` relative is rejected and ``gamma`` halved; ten rejections
    in a row abort with :class:`DivergenceError`.
    """
    F = functional or CarlemanFunctional(problem, cfg)
    v = F.to_free(v0)
    nrm = F.norm(v)
    if nrm > cfg.R * (1 + 1e-12):
        raise ValueError(f"starting point lies outside the ball: ||v0|| = {nrm:.6g} > R = {cfg.R}")
    gamma = cfg.gamma
    I_cur = F.value(v)
    history = [I_cur]
    steps = []
    active = False
    converged = False
    rejections = 0
    it = 0
    g = F.gradient(v)
    while it < cfg.max_iter:
        d = F.riesz(g)
        y = v - gamma * d
        y, hit = _project_free(y, F.norm(y), cfg.R)
        I_new = F.value(y)
        if I_new > I_cur + ROUNDOFF_REL * abs(I_cur):
            rejections += 1
            if rejections >= 10:
                raise DivergenceError(
                    f"functional increased on 10 consecutive trial steps at iteration {it}; "
                    f"step size reduced from {cfg.gamma} to {gamma}"
                )
            gamma *= 0.5
            log.info("functional increase at iteration %d, halving gamma to %g", it, gamma)
            continue
        rejections = 0
        active |= hit
        step = F.norm(y - v)
        v = y
        I_cur = I_new
        it += 1
        history.append(I_cur)
        steps.append(step)
        if step <= cfg.stop_tol * max(F.norm(v), 1e-300) or step == 0.0:
            converged = True
            break
        g = F.gradient(v)
    g = F.gradient(v)
    grad_norm = math.sqrt(max(float(g @ F.riesz(g)), 0.0))
    floor = 1e-13 * max(F.norm(v), 1e-300)
    sol = ConvexSolution(
        v_min=F.expand(v),
        iterates_norms=steps,
        functional_history=history,
        theta_hat=fit_theta(steps, tail, floor) if steps else 0.0,
        iterations=it,
        converged=converged,
        gamma=gamma,
        final_grad_norm=grad_norm,
        projection_active=active,
    )
    if v_true is not None:
        sol.errors = {
            "h10": sol.error_h10(v_true, cfg.tau),
            "hk": discrete_norm(sol.v_min - v_true, NormKind.hk(cfg.norm_order)),
        }
    return sol


# ---------------------------------------------------------------------------
# convexity probe


def _jacobi_smooth(a: np.ndarray, sweeps: int, omega: float = 2.0 / 3.0) -> np.ndarray:
    """Weighted-Jacobi sweeps for the space-time Laplacian with zero padding."""
    out = a.copy()
    nd = out.ndim
    for _ in range(sweeps):
        nb = np.zeros_like(out)
        for ax in range(nd):
            nb += np.roll(out, 1, axis=ax) * (np.arange(out.shape[ax]) > 0).reshape(
                [-1 if i == ax else 1 for i in range(nd)])
            nb += np.roll(out, -1, axis=ax) * (np.arange(out.shape[ax]) < out.shape[ax] - 1).reshape(
                [-1 if i == ax else 1 for i in range(nd)])
        out = (1 - omega) * out + omega * nb / (2 * nd)
    return out


def random_ball_field(grid: Grid, R: float, norm_order: int, rng: np.random.Generator,
                      sweeps: int | None = None) -> Field:
    """Smoothed Gaussian field satisfying the constraints with ``||v||_k < R``."""
    sweeps = norm_order if sweeps is None else sweeps
    a = _jacobi_smooth(rng.standard_normal(grid.shape), sweeps)
    a[~grid.free_mask] = 0.0
    v = Field(grid, a)
    nrm = discrete_norm(v, NormKind.hk(norm_order))
    radius = R * rng.uniform(0.05, 0.95)
    return Field(grid, a * (radius / nrm))


@dataclass
class ProbeReport:
    """Per-``nu`` convexity probe results.

    ``C2_hat`` is measured on the functional as implemented (weight equal to
    one at ``t = T``); ``C2_hat_tau`` is the same quantity divided by the
    rescale ``s``, i.e. on the scale of the functional normalized at ``tau``.
    ``C2_fit`` is the minimum of ``C2_hat`` over ``nu >= nu3``.
    """

    nu: list
    alpha: list
    alpha_eff: list
    C2_hat: list
    C2_hat_tau: list
    min_defect: list
    pairs: int
    nu3: float | None = None
    C2_fit: float | None = None

    COLUMNS = ("nu", "alpha", "alpha_eff", "C2_hat", "C2_hat_tau", "min_defect")

    def rows(self):
        for i, nu in enumerate(self.nu):
            yield (nu, self.alpha[i], self.alpha_eff[i], self.C2_hat[i], self.C2_hat_tau[i],
                   self.min_defect[i])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows():
            w.writerow([format(float(x), ".17g") for x in row])
        return buf.getvalue()


def probe_pairs(grid: Grid, cfg: ConvexConfig, pairs: int, seed: int, sweeps: int | None = None):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(pairs):
        v1 = random_ball_field(grid, cfg.R, cfg.norm_order, rng, sweeps)
        v2 = random_ball_field(grid, cfg.R, cfg.norm_order, rng, sweeps)
        out.append((free_values(v1), free_values(v2)))
    return out


def convexity_probe(problem: LiftedProblem, cfg: ConvexConfig, pairs: int = 100, seed: int = 0,
                    nu_values=None, sweeps: int | None = None, alpha_fn=None) -> ProbeReport:
    """Sample the convexity defect over random pairs in the ball.

    For each ``nu``: ``min_defect`` is the minimum over pairs of
    ``D - (alpha_eff/2) ||h||_k^2`` with ``D`` the Bregman defect of ``I``, and
    ``C2_hat`` the minimum of that quantity divided by
    ``||h||^2_{H^{1,0}(Q_{T tau})}``.  ``nu3`` is the smallest ``nu`` from
    which ``C2_hat`` stays positive over the sweep.  ``alpha_fn(nu)``, when
    given, sets ``alpha`` per ``nu``.
    """
    if pairs < 1:
        raise ValueError("need at least one pair")
    grid = problem.grid
    nus = [cfg.nu] if nu_values is None else [float(n) for n in nu_values]
    samples = probe_pairs(grid, cfg, pairs, seed, sweeps)
    h10 = gram_matrix(grid, NormKind.h10(cfg.tau))
    P = grid.prolongation
    hn = []
    for v1, v2 in samples:
        hu = P @ (v2 - v1)
        hn.append(float(hu @ (h10 @ hu)))
    out = ProbeReport([], [], [], [], [], [], pairs)
    for nu in nus:
        c = replace(cfg, nu=nu) if alpha_fn is None else replace(cfg, nu=nu, alpha=alpha_fn(nu))
        F = CarlemanFunctional(problem, c)
        excess = []
        for (v1, v2), hh in zip(samples, hn):
            h = v2 - v1
            D = F.defect(v1, v2)
            excess.append(D - 0.5 * F.alpha_eff * float(h @ (F.R @ h)))
        ratios = [e / hh for e, hh in zip(excess, hn) if hh > 0]
        C2 = min(ratios) if ratios else 0.0
        out.nu.append(nu)
        out.alpha.append(c.alpha)
        out.alpha_eff.append(F.alpha_eff)
        out.min_defect.append(min(excess))
        out.C2_hat.append(C2)
        out.C2_hat_tau.append(C2 / F.scale)
    for nu, C in zip(reversed(out.nu), reversed(out.C2_hat)):
        if C > 0:
            out.nu3 = nu
        else:
            break
    if out.nu3 is not None:
        out.C2_fit = min(C for nu, C in zip(out.nu, out.C2_hat) if nu >= out.nu3)
    return out


def alpha_rule(delta: float, cfg: ConvexConfig, carleman: CarlemanParams,
               upper: float = 0.999) -> float:
    """``alpha = 2 C2_hat exp(-2 (tau+1)^nu(delta))``, clipped into ``(0, 1)``."""
    if cfg.C2_hat is None:
        raise ValueError("alpha rule needs C2_hat (from convexity_probe or set manually)")
    nu = nu_of_delta(delta, carleman.k_base, carleman.T)
    log_alpha = math.log(2.0 * cfg.C2_hat) - float(cwf_log(carleman.tau, nu))
    alpha = math.exp(min(log_alpha, 0.0))
    if log_alpha >= math.log(upper):
        warnings.warn(f"alpha rule gives {math.exp(min(log_alpha, 700)):.4g} >= 1; clipped to {upper}",
                      AlphaClippedWarning, stacklevel=2)
        return upper
    if alpha <= 0.0:
        warnings.warn("alpha rule underflows; clipped to 1e-300", AlphaClippedWarning, stacklevel=2)
        return 1e-300
    return alpha


def fd_gradient_check(F: CarlemanFunctional, v: np.ndarray, direction: np.ndarray,
                      steps=None) -> tuple[float, float]:
    """Best relative error of ``<grad, d>`` against central differences over a step sweep.

    Returns ``(relative error, best step)``.
    """
    steps = np.logspace(-2, -7, 11) if steps is None else steps
    exact = float(F.gradient(v) @ direction)
    best = (math.inf, float("nan"))
    scale = max(F.norm(v), 1.0) / max(F.norm(direction), 1e-300)
    for s in steps:
        e = s * scale
        fd = (F.value(v + e * direction) - F.value(v - e * direction)) / (2 * e)
        err = abs(fd - exact) / max(abs(exact), 1e-300)
        if err < best[0]:
            best = (err, e)
    return best


def run_accuracy_ladder(coeffs, F, u_true: Field, delta_ladder, cfg: ConvexConfig, C2_hat: float,
                        seeds=(0,), k_base: float = 2.0, nu3: float | None = None, noise_fn=None):
    """Convexification error against the rate bound with ``nu = nu(delta)``, ``alpha = alpha(delta)``.

    Every rung starts gradient projection from zero.  ``meta["conditions"]``
    records per rung whether ``nu(delta) >= nu3`` and whether the alpha rule
    needed clipping; both are smallness requirements on ``delta``.
    """
    deltas = [float(d) for d in delta_ladder]
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta ladder must be strictly decreasing")
    grid = u_true.grid
    T = grid.T
    noise_fn = noise_fn or add_noise
    g_true = extract_final(u_true)
    c = c_exponent(cfg.tau, T)
    rows, failures, conditions = [], [], []
    base = replace(cfg, C2_hat=C2_hat)
    for delta in deltas:
        try:
            nu = nu_of_delta(delta, k_base, T)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", AlphaClippedWarning)
                alpha = alpha_rule(delta, base, CarlemanParams(max(nu, 1.0), cfg.tau, T, k_base))
            rung_cfg = replace(base, nu=nu, alpha=alpha)
        except (DeltaTooLargeError, ValueError) as exc:
            failures.append({"delta": delta, "stage": "parameters", "error": str(exc)})
            continue
        conditions.append({
            "delta": delta,
            "nu_delta": nu,
            "alpha": alpha,
            "alpha_clipped": any(issubclass(w.category, AlphaClippedWarning) for w in caught),
            "nu_at_least_nu3": None if nu3 is None else bool(nu >= nu3),
        })
        for seed in seeds:
            problem = lift(coeffs, F, noise_fn(g_true, delta, seed))
            try:
                sol = gradient_projection(grid.zeros(), problem, rung_cfg)
            except (DivergenceError, RuntimeError, ValueError) as exc:
                failures.append({"delta": delta, "seed": seed, "stage": "gradient_projection",
                                 "error": str(exc)})
                continue
            err = discrete_norm(problem.reconstruct(sol.v_min) - u_true, NormKind.h10(cfg.tau))
            bound = rate_bound(delta, k_base, c)
            rows.append(RateRow(delta, nu, alpha, cfg.tau, c, err, bound, err / bound, seed,
                                sol.iterations))
            conditions[-1].setdefault("converged", []).append(bool(sol.converged))
    return RateTable(rows, None, failures, {"conditions": conditions}).sorted()
