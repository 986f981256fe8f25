import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from revtime.experiments import (ExperimentConfig, emit_plotdata, fit_rate, read_rate_table,
                                 run_pipeline)
from revtime.qrm import RateRow, RateTable


def _rows(deltas, err_fn, bound_fn, seeds=(0,)):
    return [RateRow(d, float("nan"), d**2, 0.25, 0.2, err_fn(d), bound_fn(d),
                    err_fn(d) / bound_fn(d), s) for d in deltas for s in seeds]


@settings(max_examples=30, deadline=None)
@given(C=st.floats(1e-3, 1e3), p=st.floats(0.2, 3.0))
def test_fit_recovers_power_law(C, p):
    deltas = [1e-2, 1e-3, 1e-4, 1e-5]
    bound = lambda d: math.exp(-0.5 * math.log(1 / d) ** 0.7)
    fit = fit_rate(_rows(deltas, lambda d: C * bound(d) ** p, bound))
    assert fit.slope == pytest.approx(p, rel=1e-9, abs=1e-9)
    assert fit.rows == 4


def test_fit_exact_bound_has_unit_slope_and_spread():
    deltas = [1e-2, 1e-3, 1e-4]
    bound = lambda d: math.exp(-0.5 * math.log(1 / d) ** 0.5)
    fit = fit_rate(_rows(deltas, bound, bound))
    assert fit.slope == pytest.approx(1.0, abs=1e-12)
    assert fit.spread == pytest.approx(1.0, abs=1e-12)
    sq = fit_rate(_rows(deltas, lambda d: bound(d) ** 2, bound))
    assert sq.slope == pytest.approx(2.0, abs=1e-12)


def test_fit_rejects_bad_tables():
    b = lambda d: d
    with pytest.raises(ValueError):
        fit_rate(_rows([1e-2, 1e-3], b, b))
    with pytest.raises(ValueError):
        fit_rate(_rows([1e-2, 1e-3, 1e-4], lambda d: float("nan"), b))
    with pytest.raises(ValueError):
        fit_rate(_rows([1e-2, 1e-3, 1e-4], lambda d: 0.0, b))
    with pytest.raises(ValueError):
        fit_rate(_rows([1e-2, 1e-3, 1e-4], b, lambda d: 1.0))


def test_plotdata_and_csv_roundtrip():
    rows = _rows([1e-2, 1e-3, 1e-4], lambda d: 3 * d, lambda d: d, seeds=(1, 0))
    assert emit_plotdata([]) == "log_bound log_error\n"
    lines = emit_plotdata(rows).splitlines()
    assert lines[0] == "log_bound log_error" and len(lines) == 7
    table = RateTable(rows)
    back = read_rate_table(table.to_csv())
    assert [(r.delta, r.seed) for r in back.rows] == [(r.delta, r.seed) for r in table.sorted().rows]
    assert all(a.error_h10 == b.error_h10 for a, b in zip(back.rows, table.sorted().rows))
    with pytest.raises(ValueError):
        read_rate_table("delta,bound\n0.1,0.2\n")


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"grid": {"nt": 17, "colour": 1}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"noise": {"delta": 1e-3}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"noise": {"delta_ladder": [1e-3, 1e-2], "seeds": [0]}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"grid": {"T": 0.1}, "carleman": {"tau": 0.5}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"convex": {"nu": 20}})
    cfg = ExperimentConfig.model_validate({"grid": {"T": 0.4}})
    assert cfg.taus() == [0.1]
    assert cfg.convex.build(0.4).tau == pytest.approx(0.2)
    assert cfg.problem.resolved()["coefficients"] == "heat"


def _small(**extra):
    base = {"grid": {"nx": [9], "nt": 9, "T": 0.1}, "qrm": {"solver": "direct"}}
    base.update(extra)
    return ExperimentConfig.model_validate(base)


def test_qrm_ladder_pipeline_rows():
    cfg = _small(noise={"delta_ladder": [1e-2, 1e-3, 1e-4], "seeds": [3, 1]},
                 qrm={"solver": "direct", "alpha_rule": "delta_squared"})
    res = run_pipeline("rate-ladder", cfg)
    lines = res.files["rate_table.csv"].splitlines()
    assert len(lines) == 7
    seeds = [int(line.split(",")[-1]) for line in lines[1:]]
    assert seeds == [1, 3] * 3
    assert "0.025" in res.summary["fits"]
    assert "rate_plot_tau0.025.dat" in res.files


def test_qrm_pipeline_rejects_nonlinear():
    from revtime.experiments import StageError
    with pytest.raises(StageError):
        run_pipeline("qrm", _small(problem={"preset": "sin"}))


def test_forward_pipeline_is_deterministic():
    a = run_pipeline("forward", _small())
    b = run_pipeline("forward", _small())
    assert a.files["final_data.csv"] == b.files["final_data.csv"]
    assert np.array_equal(a.files["u_true.rvtf"].values, b.files["u_true.rvtf"].values)
