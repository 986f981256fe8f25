"""Carleman weight ``exp(2 (t+1)^nu)``, the noise-to-parameter calculus and an
empirical check of the weighted energy inequality.

Weights are only ever formed in anchored form
``exp(2 (t+1)^nu - 2 (anchor+1)^nu)``; the raw exponential overflows double
precision long before the parameter ranges of interest.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Field
from .model import CoefficientSet, L_matrix

__all__ = [
    "CarlemanParams",
    "CarlemanReport",
    "DeltaTooLargeError",
    "OVERFLOW_LOG",
    "cwf_log",
    "anchored_weight",
    "check_overflow",
    "max_admissible_nu",
    "nu_of_delta",
    "c_exponent",
    "rate_bound",
    "log_rate_bound",
    "weight_ratios",
    "verify_carleman",
    "default_nu_grid",
]

# largest admissible value of the log-weight 2 (T+1)^nu
OVERFLOW_LOG = 700.0


class DeltaTooLargeError(ValueError):
    pass


def cwf_log(t, nu: float):
    """Logarithm ``2 (t+1)^nu`` of the Carleman weight."""
    return 2.0 * np.power(np.asarray(t, dtype=float) + 1.0, nu)


def check_overflow(nu: float, T: float) -> None:
    if float(cwf_log(T, nu)) > OVERFLOW_LOG:
        raise ValueError(
            f"nu={nu} exceeds the overflow guard: 2(T+1)^nu = {float(cwf_log(T, nu)):.4g} > {OVERFLOW_LOG}"
        )


def max_admissible_nu(T: float) -> float:
    return math.log(OVERFLOW_LOG / 2.0) / math.log(T + 1.0)


@dataclass(frozen=True)
class CarlemanParams:
    nu: float
    tau: float
    T: float
    k_base: float = 2.0
    anchor: float | None = None

    def __post_init__(self):
        if self.nu < 1:
            raise ValueError(f"nu must be >= 1, got {self.nu}")
        if not (0 < self.tau < self.T):
            raise ValueError(f"tau must lie in (0, T), got tau={self.tau}, T={self.T}")
        if self.k_base <= 0:
            raise ValueError("k_base must be positive")
        if self.anchor is None:
            object.__setattr__(self, "anchor", self.T)
        if not (0 <= self.anchor <= self.T):
            raise ValueError("anchor must lie in [0, T]")
        check_overflow(self.nu, self.T)

    @property
    def c(self) -> float:
        return c_exponent(self.tau, self.T)


def anchored_weight(t, params: CarlemanParams):
    """``exp(cwf_log(t) - cwf_log(anchor))``; equals 1 at the anchor."""
    check_overflow(params.nu, params.T)
    return np.exp(cwf_log(t, params.nu) - cwf_log(params.anchor, params.nu))


def nu_of_delta(delta: float, k_base: float, T: float) -> float:
    """Parameter with ``exp(k (T+1)^nu) = 1/delta``."""
    if not (0 < delta < 1):
        raise DeltaTooLargeError(f"delta must lie in (0, 1), got {delta}")
    inner = math.log(1.0 / delta) / k_base
    if inner <= 1.0:
        raise DeltaTooLargeError(
            f"delta={delta} too large: ln(delta^(-1/k)) = {inner:.4g} <= 1 gives nu <= 0"
        )
    return math.log(inner) / math.log(T + 1.0)


def c_exponent(tau: float, T: float) -> float:
    if not (0 < tau < T):
        raise ValueError(f"tau must lie in (0, T), got tau={tau}, T={T}")
    return math.log(tau + 1.0) / math.log(T + 1.0)


def log_rate_bound(delta: float, k_base: float, c: float) -> float:
    if not (0 < delta < 1):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not (0 < c <= 1):
        raise ValueError(f"c must lie in (0, 1], got {c}")
    return -(math.log(1.0 / delta) ** c) / k_base**c


def rate_bound(delta: float, k_base: float, c: float) -> float:
    """``exp[-(1/k^c) ln(1/delta)^c]``."""
    return math.exp(log_rate_bound(delta, k_base, c))


def weight_ratios(delta_ladder, tau: float, T: float, k_base: float, y: float) -> list[dict]:
    """Per rung: the weight ``exp(-2(tau+1)^nu(delta))`` against ``delta^y`` and ``ln(1/delta)^-y``.

    Each row has log-domain values ``log_ratio_holder``, ``log_ratio_log``,
    ``log_weight`` (direct) and ``log_identity`` (closed form through ``c``).
    """
    if y <= 0:
        raise ValueError("y must be positive")
    deltas = [float(d) for d in delta_ladder]
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta ladder must be strictly decreasing")
    c = c_exponent(tau, T)
    rows = []
    for d in deltas:
        nu = nu_of_delta(d, k_base, T)
        L = math.log(1.0 / d)
        log_w = -2.0 * (tau + 1.0) ** nu
        log_id = -2.0 * L**c / k_base**c
        rows.append({
            "delta": d,
            "nu": nu,
            "log_weight": log_w,
            "log_identity": log_id,
            "log_ratio_holder": log_w + y * L,
            "log_ratio_log": log_w + y * math.log(L),
            "ratio_holder": math.exp(min(log_w + y * L, 700.0)),
            "ratio_log": math.exp(log_w + y * math.log(L)),
        })
    return rows


def default_nu_grid(T: float) -> list[float]:
    nmax = max_admissible_nu(T)
    return [float(n) for n in range(1, 11) if n <= nmax]


@dataclass
class CarlemanReport:
    nu_grid: list[float]
    lhs: list[float]
    grad_term: list[float]
    val_term: list[float]
    data_final: list[float]
    data_initial: list[float]
    fitted_C: list[float]
    anchor: float
    empirical_nu0: float | None = None
    meta: dict = field(default_factory=dict)

    COLUMNS = ("nu", "lhs", "grad_term", "val_term", "data_final", "data_initial", "fitted_C")

    def rows(self):
        for i, nu in enumerate(self.nu_grid):
            yield (nu, self.lhs[i], self.grad_term[i], self.val_term[i],
                   self.data_final[i], self.data_initial[i], self.fitted_C[i])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows():
            w.writerow([format(v, ".17g") for v in row])
        return buf.getvalue()


def _empirical_nu0(nu_grid, fitted) -> float | None:
    """Smallest grid value from which ``fitted_C`` stays positive."""
    nu0 = None
    for nu, C in zip(reversed(nu_grid), reversed(fitted)):
        if C > 0:
            nu0 = nu
        else:
            break
    return nu0


def verify_carleman(u: Field, coeffs: CoefficientSet, nu_grid=None, anchor: float | None = None,
                    boundary_tol: float = 1e-12) -> CarlemanReport:
    """Evaluate every term of the weighted inequality for ``u`` on a grid of ``nu``.

    All terms carry the common factor ``exp(-cwf_log(anchor))``.  The fitted
    constant per ``nu`` is ``lhs / (sqrt(nu) grad + nu^2 val + data_final +
    data_initial)``, a constant for which the inequality holds for this ``u``.
    """
    grid = u.grid
    T = grid.T
    anchor = T if anchor is None else float(anchor)
    scale = max(1.0, float(np.max(np.abs(u.values))))
    if np.max(np.abs(u.values[grid.boundary_mask])) > boundary_tol * scale:
        raise ValueError("u must vanish on the lateral boundary S_T")
    nu_grid = default_nu_grid(T) if nu_grid is None else [float(n) for n in nu_grid]
    for nu in nu_grid:
        check_overflow(nu, T)

    uf = u.flat
    Dt = grid.derivative_matrix((1,) + (0,) * grid.dim)
    residual = (Dt @ uf - L_matrix(coeffs, grid) @ uf).reshape(grid.shape)
    grads = [(D @ uf).reshape(grid.shape) for D in grid.gradient_matrices()]
    grad_sq = sum(g**2 for g in grads)
    ws = grid.space_weights
    per_t_res = np.sum(ws * residual**2, axis=tuple(range(1, grid.dim + 1)))
    per_t_grad = np.sum(ws * grad_sq, axis=tuple(range(1, grid.dim + 1)))
    per_t_val = np.sum(ws * u.values**2, axis=tuple(range(1, grid.dim + 1)))
    final_sq = float(np.sum(ws * u.values[-1] ** 2))
    init_grad_sq = float(np.sum(ws * grad_sq[0]))
    wt = grid.time_weights

    lhs, gt, vt, df, di, fc = [], [], [], [], [], []
    for nu in nu_grid:
        log_a = float(cwf_log(anchor, nu))
        w = np.exp(cwf_log(grid.t, nu) - log_a) * wt
        L_ = float(np.sum(w * per_t_res))
        G_ = float(np.sum(w * per_t_grad))
        V_ = float(np.sum(w * per_t_val))
        log_df = 1.5 * float(cwf_log(T, nu)) - log_a
        D_f = math.exp(log_df) * final_sq if final_sq > 0 else 0.0
        D_i = math.exp(-log_a) * init_grad_sq
        denom = math.sqrt(nu) * G_ + nu**2 * V_ + D_f + D_i
        C = L_ / denom if denom > 0 else 0.0
        lhs.append(L_)
        gt.append(G_)
        vt.append(V_)
        df.append(D_f)
        di.append(D_i)
        fc.append(C)
    return CarlemanReport(nu_grid, lhs, gt, vt, df, di, fc, anchor, _empirical_nu0(nu_grid, fc))
