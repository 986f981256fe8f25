"""Config-driven pipelines behind the command line.

A config is one JSON document validated against :class:`ExperimentConfig`.
Every pipeline returns a :class:`RunResult` holding the files to write, the
summary dictionary and the outcome of the configured assertions; writing
happens in one place so reruns produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field as PField, model_validator

from .carleman import (CarlemanReport, check_overflow, default_nu_grid, max_admissible_nu,
                       rate_bound, c_exponent, verify_carleman)
from .convexify import (AlphaClippedWarning, CarlemanFunctional, ConvexConfig, alpha_rule,
                        convexity_probe, fd_gradient_check, gradient_projection, random_ball_field,
                        run_accuracy_ladder)
from .carleman import CarlemanParams
from .forward import add_noise, extract_final, generate_data
from .grid import GridSpec, NormKind, build_grid, discrete_norm
from .model import lift
from .problems import PROBLEM_PRESETS, make_problem, smooth_test_functions
from .qrm import QrmConfig, RateRow, RateTable, assemble_qrm, minimize_qrm, run_noise_ladder

__all__ = [
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "RunResult",
    "FitSummary",
    "fit_rate",
    "emit_plotdata",
    "read_rate_table",
    "run_pipeline",
    "PIPELINES",
]

SCHEMA_VERSION = 1


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# config schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridModel(_Strict):
    spatial_dim: Literal[1, 2] = 1
    box_lengths: list[float] = PField(default_factory=lambda: [1.0])
    nx: list[int] = PField(default_factory=lambda: [33])
    nt: int = 33
    T: float = 1.0

    def spec(self) -> GridSpec:
        return GridSpec(self.spatial_dim, tuple(self.box_lengths), tuple(self.nx), self.nt, self.T)

    @model_validator(mode="after")
    def _check(self):
        self.spec()
        return self


class ProblemModel(_Strict):
    preset: Literal[tuple(PROBLEM_PRESETS)] = "heat"
    coefficients: str | None = None
    coefficient_params: dict | None = None
    nonlinearity: str | None = None
    nonlinearity_params: dict | None = None
    initial: Literal["sine", "two_mode", "poly"] | None = None
    refine: int = PField(2, ge=1, le=4)

    def resolved(self) -> dict:
        base = dict(PROBLEM_PRESETS[self.preset])
        for key in ("coefficients", "coefficient_params", "nonlinearity", "nonlinearity_params",
                    "initial"):
            val = getattr(self, key)
            if val is not None:
                base[key] = val
        return base


class CarlemanModel(_Strict):
    tau: float | None = None
    taus: list[float] | None = None
    k_base: float = PField(2.0, gt=0)
    nu: float | None = None
    nu_grid: list[float] | None = None
    anchor: float | None = None


class QrmModel(_Strict):
    alpha: float = PField(1e-6, gt=0, lt=1)
    cg_tol: float = PField(1e-10, gt=0, le=1e-2)
    cg_max_iter: int = PField(50_000, ge=1)
    alpha_rule: Literal["manual", "delta_squared"] = "manual"
    solver: Literal["cg", "direct"] = "cg"
    norm_order: Literal[2, 3, 4] = 2
    jacobi: bool = True

    def build(self) -> QrmConfig:
        return QrmConfig(**self.model_dump())


class ConvexModel(_Strict):
    alpha: float = PField(0.5, gt=0, lt=1)
    nu: float = PField(2.0, ge=1)
    tau: float | None = PField(None, gt=0)
    R: float = PField(10.0, gt=0)
    norm_order: Literal[2, 3, 4] = 2
    gamma: float = PField(0.1, gt=0, lt=1)
    max_iter: int = PField(20_000, ge=1)
    stop_tol: float = PField(1e-8, gt=0)
    C2_hat: float | None = PField(None, gt=0)
    alpha_from_rule: bool = False

    def build(self, T: float) -> ConvexConfig:
        """``tau`` defaults to ``T/2``."""
        kw = self.model_dump(exclude={"alpha_from_rule"})
        if kw["tau"] is None:
            kw["tau"] = T / 2
        return ConvexConfig(**kw)


class NoiseModel(_Strict):
    delta: float = PField(0.0, ge=0, lt=1)
    delta_ladder: list[float] | None = None
    seeds: list[int] | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.delta_ladder is not None:
            d = self.delta_ladder
            if any(not (0 < x < 1) for x in d):
                raise ValueError("delta_ladder entries must lie in (0, 1)")
            if any(b >= a for a, b in zip(d, d[1:])):
                raise ValueError("delta_ladder must be strictly decreasing")
        if (self.delta > 0 or self.delta_ladder) and not self.seeds:
            raise ValueError("seeds are mandatory when noise is added")
        return self


class ProbeModel(_Strict):
    pairs: int = PField(100, ge=1)
    seed: int | None = None
    nu_grid: list[float] | None = None
    sweeps: int | None = PField(None, ge=0)
    alpha_from_rule: bool = True


class VerifyModel(_Strict):
    functions: int = PField(20, ge=1)
    seed: int | None = None


class LadderModel(_Strict):
    method: Literal["qrm", "convexify"] = "qrm"
    C2_hat: float | None = PField(None, gt=0)


class FitModel(_Strict):
    table: str


class AssertionsModel(_Strict):
    max_relative_error_h10: float | None = None
    max_error_h10: float | None = None
    slope_range: tuple[float, float] | None = None
    max_spread: float | None = None
    max_nu0: float | None = None
    require_nu3: bool | None = None
    nonnegative_defect: bool | None = None
    theta_below_one: bool | None = None
    nonincreasing_history: bool | None = None
    max_grad_fd_err: float | None = None


class ExperimentConfig(_Strict):
    grid: GridModel = PField(default_factory=GridModel)
    problem: ProblemModel = PField(default_factory=ProblemModel)
    carleman: CarlemanModel = PField(default_factory=CarlemanModel)
    qrm: QrmModel = PField(default_factory=QrmModel)
    convex: ConvexModel = PField(default_factory=ConvexModel)
    noise: NoiseModel = PField(default_factory=NoiseModel)
    probe: ProbeModel = PField(default_factory=ProbeModel)
    verify: VerifyModel = PField(default_factory=VerifyModel)
    ladder: LadderModel = PField(default_factory=LadderModel)
    fit: FitModel | None = None
    assertions: AssertionsModel = PField(default_factory=AssertionsModel)
    output: str = "out"

    @model_validator(mode="after")
    def _check(self):
        T = self.grid.T
        for tau in self.taus():
            if not (0 <= tau < T):
                raise ValueError(f"carleman.tau must lie in [0, T), got {tau}")
        if self.convex.tau is not None and not (0 < self.convex.tau < T):
            raise ValueError(f"convex.tau must lie in (0, T), got {self.convex.tau}")
        for nu in (self.carleman.nu_grid or []) + ([self.carleman.nu] if self.carleman.nu else []):
            if nu > max_admissible_nu(T):
                raise ValueError(f"nu={nu} exceeds the overflow guard for T={T}")
        if self.convex.nu > max_admissible_nu(T):
            raise ValueError(f"convex.nu={self.convex.nu} exceeds the overflow guard for T={T}")
        return self

    def taus(self) -> list[float]:
        c = self.carleman
        if c.taus is not None:
            return list(c.taus)
        if c.tau is not None:
            return [c.tau]
        return [self.grid.T / 4]


# ---------------------------------------------------------------------------
# rate fitting and plot data


@dataclass(frozen=True)
class FitSummary:
    slope: float
    intercept: float
    spread: float
    rows: int

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "spread": self.spread,
                "rows": self.rows}


def _rows_of(table):
    return table.rows if isinstance(table, RateTable) else list(table)


def fit_rate(table) -> FitSummary:
    """Least squares of ``log(error)`` on ``log(bound)``; spread = max/min implied constant."""
    rows = _rows_of(table)
    if len(rows) < 3:
        raise ValueError(f"rate fit needs at least 3 rows, got {len(rows)}")
    err = np.array([r.error_h10 for r in rows], dtype=float)
    bnd = np.array([r.bound for r in rows], dtype=float)
    if not (np.all(np.isfinite(err)) and np.all(np.isfinite(bnd))):
        raise ValueError("rate table contains non-finite entries")
    if np.any(err <= 0) or np.any(bnd <= 0):
        raise ValueError("errors and bounds must be positive for a log-log fit")
    x, y = np.log(bnd), np.log(err)
    if np.ptp(x) == 0:
        raise ValueError("all bounds coincide; slope undefined")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    implied = err / bnd
    return FitSummary(float(slope), float(intercept), float(implied.max() / implied.min()), len(rows))


def emit_plotdata(table) -> str:
    """Two columns ``log_bound log_error``, one row per table row, 17 significant digits."""
    lines = ["log_bound log_error"]
    for r in sorted(_rows_of(table), key=lambda r: (-r.delta, r.tau, r.seed)):
        lines.append(f"{_fmt(math.log(r.bound))} {_fmt(math.log(r.error_h10))}")
    return "\n".join(lines) + "\n"


def read_rate_table(text: str) -> RateTable:
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for rec in reader:
        try:
            rows.append(RateRow(
                delta=float(rec["delta"]), nu_delta=float(rec.get("nu_delta", "nan")),
                alpha=float(rec.get("alpha", "nan")), tau=float(rec.get("tau", "nan")),
                c=float(rec.get("c", "nan")), error_h10=float(rec["error_h10"]),
                bound=float(rec["bound"]), implied_C=float(rec.get("implied_C", "nan")),
                seed=int(float(rec.get("seed", 0) or 0)),
                cg_iters=int(float(rec.get("cg_iters", 0) or 0)),
            ))
        except KeyError as exc:
            raise ValueError(f"rate table is missing column {exc}") from None
    return RateTable(rows)


# ---------------------------------------------------------------------------
# pipelines


class StageError(RuntimeError):
    """Solver failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class RunResult:
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    assertions: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.assertions.values())

    def check(self, name: str, passed: bool, value, limit=None) -> None:
        self.assertions[name] = {"passed": bool(passed), "value": _jsonable(value), "limit": _jsonable(limit)}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def _setup(cfg: ExperimentConfig):
    grid = build_grid(cfg.grid.spec())
    prob = cfg.problem.resolved()
    fp = _stage("problem", make_problem, grid, **prob)
    return grid, fp


def _truth(cfg: ExperimentConfig, grid, fp):
    return _stage("forward", generate_data, fp, grid, cfg.problem.refine)


def _seeds(cfg: ExperimentConfig) -> list[int]:
    return list(cfg.noise.seeds or [0])


def run_forward(cfg: ExperimentConfig) -> RunResult:
    grid, fp = _setup(cfg)
    u = _truth(cfg, grid, fp)
    g = extract_final(u)
    res = RunResult()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i + 1}" for i in range(grid.dim)] + ["g"])
    for idx in np.ndindex(*grid.space_shape):
        w.writerow([_fmt(grid.x[i][idx[i]]) for i in range(grid.dim)] + [_fmt(g.values[idx])])
    res.files["final_data.csv"] = buf.getvalue()
    res.files["u_true.rvtf"] = u
    res.summary["norms"] = {
        "l2_final": discrete_norm(g, NormKind.l2_space()),
        "l2_QT": discrete_norm(u, NormKind.l2()),
        "h2_QT": discrete_norm(u, NormKind.hk(2)),
    }
    return res


def run_qrm(cfg: ExperimentConfig) -> RunResult:
    grid, fp = _setup(cfg)
    if not fp.F.is_linear:
        raise StageError("qrm", ValueError("QRM needs a linear nonlinearity preset"))
    u = _truth(cfg, grid, fp)
    qc = cfg.qrm.build()
    delta = cfg.noise.delta
    seed = _seeds(cfg)[0]
    g = add_noise(extract_final(u), delta, seed)
    problem = _stage("lift", lift, fp.coeffs, fp.F, g)
    alpha = qc.alpha_for(delta) if delta > 0 else qc.alpha
    handle = _stage("assemble", assemble_qrm, problem, qc, alpha=alpha)
    sol = _stage("solve", minimize_qrm, handle, qc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("delta", "alpha", "tau", "error_h10", "relative_error_h10", "iterations",
            "identity_residual", "J_value", "h2_norm")
    w.writerow(cols)
    rels = []
    for tau in cfg.taus():
        err = sol.error_h10(u, tau)
        rel = err / discrete_norm(u, NormKind.h10(tau))
        rels.append(rel)
        w.writerow([_fmt(x) for x in (delta, alpha, tau, err, rel, sol.iterations,
                                      sol.identity_residual, sol.J_value, sol.h2_norm)])
    res = RunResult()
    res.files["qrm_report.csv"] = buf.getvalue()
    res.files["residual_history.csv"] = "iteration,relative_residual\n" + "".join(
        f"{i},{_fmt(r)}\n" for i, r in enumerate(sol.residual_history))
    res.summary.update({"iterations": sol.iterations, "identity_residual": sol.identity_residual,
                        "relative_error_h10": rels, "alpha": alpha})
    a = cfg.assertions
    if a.max_relative_error_h10 is not None:
        res.check("max_relative_error_h10", max(rels) <= a.max_relative_error_h10, max(rels),
                  a.max_relative_error_h10)
    return res


CONVEX_COLUMNS = ("nu", "alpha_eff", "C2_hat", "min_defect", "theta_hat", "grad_fd_err", "error_h10",
                  "bound", "implied_C")


def _convex_config(cfg: ExperimentConfig, C2: float | None = None, delta: float = 0.0):
    cc = cfg.convex.build(cfg.grid.T)
    if C2 is not None:
        cc = replace(cc, C2_hat=C2)
    if cfg.convex.alpha_from_rule:
        if delta <= 0:
            raise StageError("alpha_rule", ValueError("alpha_from_rule needs noise.delta > 0"))
        if cc.C2_hat is None:
            raise StageError("alpha_rule", ValueError("alpha_from_rule needs C2_hat"))
        params = CarlemanParams(cc.nu, cc.tau, cfg.grid.T, cfg.carleman.k_base)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AlphaClippedWarning)
            cc = replace(cc, alpha=alpha_rule(delta, cc, params))
    return cc


def run_convexify(cfg: ExperimentConfig) -> RunResult:
    grid, fp = _setup(cfg)
    u = _truth(cfg, grid, fp)
    delta = cfg.noise.delta
    seed = _seeds(cfg)[0]
    problem = _stage("lift", lift, fp.coeffs, fp.F, add_noise(extract_final(u), delta, seed))
    probe_seed = cfg.probe.seed if cfg.probe.seed is not None else seed
    base = cfg.convex.build(cfg.grid.T)
    probe = _stage("probe", convexity_probe, problem, base, cfg.probe.pairs, probe_seed,
                   None, cfg.probe.sweeps)
    C2 = cfg.convex.C2_hat or (probe.C2_hat[0] if probe.C2_hat[0] > 0 else None)
    cc = _convex_config(cfg, C2, delta)
    F = CarlemanFunctional(problem, cc)
    rng = np.random.default_rng(probe_seed)
    v = random_ball_field(grid, cc.R, cc.norm_order, rng)
    d = random_ball_field(grid, cc.R, cc.norm_order, rng)
    fd_err, _ = fd_gradient_check(F, F.to_free(v), F.to_free(d))
    v_true = problem.v_of(u)
    sol = _stage("gradient_projection", gradient_projection, grid.zeros(), problem, cc, v_true, F)
    err = discrete_norm(problem.reconstruct(sol.v_min) - u, NormKind.h10(cc.tau))
    if delta > 0:
        bound = rate_bound(delta, cfg.carleman.k_base, c_exponent(cc.tau, grid.T))
    else:
        bound = float("nan")
    row = (cc.nu, F.alpha_eff, probe.C2_hat[0], probe.min_defect[0], sol.theta_hat, fd_err, err,
           bound, err / bound)
    res = RunResult()
    res.files["convex_report.csv"] = ",".join(CONVEX_COLUMNS) + "\n" + ",".join(_fmt(x) for x in row) + "\n"
    hist = ["iteration,functional,step"]
    for i, val in enumerate(sol.functional_history):
        step = sol.iterates_norms[i - 1] if i > 0 else 0.0
        hist.append(f"{i},{_fmt(val)},{_fmt(step)}")
    res.files["history.csv"] = "\n".join(hist) + "\n"
    res.summary.update({
        "alpha": cc.alpha, "alpha_eff": F.alpha_eff, "C2_hat": probe.C2_hat[0],
        "theta_hat": sol.theta_hat, "iterations": sol.iterations, "converged": sol.converged,
        "gamma_final": sol.gamma, "final_grad_norm": sol.final_grad_norm,
        "projection_active": sol.projection_active, "error_h10": err, "grad_fd_err": fd_err,
    })
    a = cfg.assertions
    hist_vals = np.asarray(sol.functional_history)
    monotone = bool(np.all(np.diff(hist_vals) <= 1e-12 * np.abs(hist_vals[:-1])))
    if a.theta_below_one:
        res.check("theta_below_one", sol.theta_hat < 1, sol.theta_hat, 1.0)
    if a.nonincreasing_history:
        res.check("nonincreasing_history", monotone, monotone, True)
    if a.max_grad_fd_err is not None:
        res.check("max_grad_fd_err", fd_err <= a.max_grad_fd_err, fd_err, a.max_grad_fd_err)
    if a.max_error_h10 is not None:
        res.check("max_error_h10", err <= a.max_error_h10, err, a.max_error_h10)
    return res


def run_carleman_verify(cfg: ExperimentConfig) -> RunResult:
    grid, fp = _setup(cfg)
    c = cfg.carleman
    nu_grid = c.nu_grid or ([c.nu] if c.nu else default_nu_grid(grid.T))
    for nu in nu_grid:
        check_overflow(nu, grid.T)
    seed = cfg.verify.seed if cfg.verify.seed is not None else _seeds(cfg)[0]
    fns = smooth_test_functions(grid, cfg.verify.functions, seed)
    lines = ["function," + ",".join(CarlemanReport.COLUMNS)]
    nu0s = []
    min_C = math.inf
    for i, u in enumerate(fns):
        rep = _stage("carleman", verify_carleman, u, fp.coeffs, nu_grid, c.anchor)
        for row in rep.rows():
            lines.append(f"{i}," + ",".join(_fmt(x) for x in row))
        nu0s.append(rep.empirical_nu0)
        min_C = min(min_C, min(rep.fitted_C))
    nu0 = None if any(n is None for n in nu0s) else max(nu0s)
    res = RunResult()
    res.files["carleman_report.csv"] = "\n".join(lines) + "\n"
    res.summary.update({"nu_grid": nu_grid, "empirical_nu0": nu0, "per_function_nu0": nu0s,
                        "min_fitted_C": min_C})
    a = cfg.assertions
    if a.max_nu0 is not None:
        res.check("max_nu0", nu0 is not None and nu0 <= a.max_nu0, nu0, a.max_nu0)
    return res


def run_probe(cfg: ExperimentConfig) -> RunResult:
    grid, fp = _setup(cfg)
    u = _truth(cfg, grid, fp)
    seed = cfg.probe.seed if cfg.probe.seed is not None else _seeds(cfg)[0]
    problem = _stage("lift", lift, fp.coeffs, fp.F, extract_final(u))
    base = cfg.convex.build(cfg.grid.T)
    nus = cfg.probe.nu_grid or [n for n in default_nu_grid(grid.T) if n >= 1]
    first = _stage("probe", convexity_probe, problem, base, cfg.probe.pairs, seed, nus,
                   cfg.probe.sweeps)
    report = first
    C2 = first.C2_fit
    if cfg.probe.alpha_from_rule and C2 is not None:
        tau = base.tau

        def alpha_fn(nu):
            log_a = math.log(2 * C2) - 2.0 * (tau + 1.0) ** nu
            return min(math.exp(log_a), 0.999)

        report = _stage("probe_rule", convexity_probe, problem, base, cfg.probe.pairs, seed, nus,
                        cfg.probe.sweeps, alpha_fn)
    res = RunResult()
    res.files["probe_report.csv"] = report.to_csv()
    if report is not first:
        res.files["probe_fit_report.csv"] = first.to_csv()
    res.summary.update({"nu3": report.nu3, "C2_fit": C2, "pairs": cfg.probe.pairs,
                        "min_defect": min(report.min_defect)})
    beyond = [m for nu, m in zip(report.nu, report.min_defect)
              if report.nu3 is not None and nu >= report.nu3]
    a = cfg.assertions
    if a.require_nu3:
        res.check("require_nu3", report.nu3 is not None, report.nu3, True)
    if a.nonnegative_defect:
        ok = bool(beyond) and min(beyond) >= 0
        res.check("nonnegative_defect", ok, min(beyond) if beyond else None, 0.0)
    return res


def run_rate_ladder(cfg: ExperimentConfig) -> RunResult:
    grid, fp = _setup(cfg)
    if not cfg.noise.delta_ladder:
        raise StageError("ladder", ValueError("rate-ladder needs noise.delta_ladder"))
    u = _truth(cfg, grid, fp)
    seeds = _seeds(cfg)
    res = RunResult()
    if cfg.ladder.method == "qrm":
        qc = cfg.qrm.build()
        if qc.alpha_rule != "delta_squared":
            raise StageError("ladder", ValueError("the QRM ladder uses qrm.alpha_rule = delta_squared"))
        table = _stage("ladder", run_noise_ladder, fp.coeffs, fp.F, u, cfg.noise.delta_ladder, qc,
                       seeds, cfg.taus(), cfg.carleman.k_base)
        if table.baseline:
            res.summary["baseline"] = table.baseline
    else:
        cc = cfg.convex.build(cfg.grid.T)
        C2 = cfg.ladder.C2_hat or cc.C2_hat
        nu3 = None
        if C2 is None:
            problem = _stage("lift", lift, fp.coeffs, fp.F, extract_final(u))
            nus = cfg.probe.nu_grid or default_nu_grid(grid.T)
            probe_seed = cfg.probe.seed if cfg.probe.seed is not None else seeds[0]
            probe = _stage("probe", convexity_probe, problem, cc, cfg.probe.pairs, probe_seed, nus,
                           cfg.probe.sweeps)
            C2, nu3 = probe.C2_fit, probe.nu3
            if C2 is None:
                raise StageError("probe", ValueError("no nu in the sweep gives a positive C2_hat"))
        table = _stage("ladder", run_accuracy_ladder, fp.coeffs, fp.F, u, cfg.noise.delta_ladder,
                       cc, C2, seeds, cfg.carleman.k_base, nu3)
        res.summary["C2_hat"] = C2
        res.summary["nu3"] = nu3
        res.summary["conditions"] = table.meta.get("conditions", [])
    res.files["rate_table.csv"] = table.to_csv()
    taus = sorted({r.tau for r in table.rows})
    for tau in taus:
        res.files[f"rate_plot_tau{tau:.6g}.dat"] = emit_plotdata(table.for_tau(tau))
    res.summary["failures"] = table.failures
    fits = {}
    for tau in taus:
        sub = table.for_tau(tau)
        if len(sub.rows) >= 3:
            fits[f"{tau:.6g}"] = fit_rate(sub).to_dict()
    res.summary["fits"] = fits
    a = cfg.assertions
    if table.failures:
        res.check("no_failed_rungs", False, len(table.failures), 0)
    for key, fit in fits.items():
        if a.slope_range is not None:
            lo, hi = a.slope_range
            res.check(f"slope_tau{key}", lo <= fit["slope"] <= hi, fit["slope"], [lo, hi])
        if a.max_spread is not None:
            res.check(f"spread_tau{key}", fit["spread"] < a.max_spread, fit["spread"], a.max_spread)
    return res


def run_fit_rate(cfg: ExperimentConfig) -> RunResult:
    if cfg.fit is None:
        raise StageError("fit", ValueError("fit-rate needs a 'fit' section naming the table"))
    with open(cfg.fit.table, encoding="utf-8") as fh:
        text = fh.read()
    table = _stage("fit", read_rate_table, text)
    fit = _stage("fit", fit_rate, table)
    res = RunResult()
    res.summary["fit"] = fit.to_dict()
    res.summary["table_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    res.files["rate_plot.dat"] = emit_plotdata(table)
    a = cfg.assertions
    if a.slope_range is not None:
        lo, hi = a.slope_range
        res.check("slope", lo <= fit.slope <= hi, fit.slope, [lo, hi])
    if a.max_spread is not None:
        res.check("spread", fit.spread < a.max_spread, fit.spread, a.max_spread)
    return res


PIPELINES = {
    "forward": run_forward,
    "qrm": run_qrm,
    "convexify": run_convexify,
    "carleman-verify": run_carleman_verify,
    "rate-ladder": run_rate_ladder,
    "probe-convexity": run_probe,
    "fit-rate": run_fit_rate,
}


def run_pipeline(command: str, cfg: ExperimentConfig) -> RunResult:
    return PIPELINES[command](cfg)


def config_hash(resolved: dict, extra: bytes = b"") -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode() + extra
    return hashlib.sha256(blob).hexdigest()
