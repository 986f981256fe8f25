import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from revtime.carleman import (CarlemanParams, DeltaTooLargeError, anchored_weight, c_exponent,
                              check_overflow, cwf_log, default_nu_grid, weight_ratios,
                              max_admissible_nu, nu_of_delta, rate_bound, verify_carleman)
from revtime.grid import Field
from revtime.model import coefficient_preset
from revtime.problems import smooth_test_functions

from conftest import make_grid

# reference values below were evaluated with mpmath at 30 digits


def test_cwf_log_values():
    assert cwf_log(0.0, 1) == 2.0
    assert cwf_log(1.0, 2) == 8.0
    assert math.isclose(float(cwf_log(0.5, 3)), 6.75, rel_tol=1e-15)


def test_anchored_weight():
    p = CarlemanParams(nu=3, tau=0.5, T=1.0, anchor=0.5)
    assert math.isclose(float(anchored_weight(1.0, p)), 10404.565716560723, rel_tol=1e-12)
    assert float(anchored_weight(0.5, p)) == 1.0
    q = CarlemanParams(nu=2, tau=0.5, T=1.0)
    t = np.linspace(0, 1, 101)
    w = anchored_weight(t, q)
    assert w[-1] == 1.0 and np.all(np.diff(w) > 0)


def test_params_validation():
    with pytest.raises(ValueError):
        CarlemanParams(nu=0.5, tau=0.5, T=1.0)
    with pytest.raises(ValueError):
        CarlemanParams(nu=2, tau=1.0, T=1.0)
    with pytest.raises(ValueError):
        CarlemanParams(nu=9, tau=0.5, T=1.0)
    assert CarlemanParams(nu=8, tau=0.5, T=1.0).anchor == 1.0
    with pytest.raises(ValueError):
        check_overflow(9, 1.0)
    assert 8 < max_admissible_nu(1.0) < 9
    assert default_nu_grid(1.0) == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]


def test_nu_of_delta_values():
    k = 2.0
    assert math.isclose(nu_of_delta(math.exp(-k * math.e), k, math.e - 1), 1.0, rel_tol=1e-14)
    assert math.isclose(nu_of_delta(1e-6, 3, 1.0), 2.2032544726997217, rel_tol=1e-12)
    with pytest.raises(DeltaTooLargeError):
        nu_of_delta(0.5, 2, 1.0)
    with pytest.raises(DeltaTooLargeError):
        nu_of_delta(1.5, 2, 1.0)


def test_c_exponent():
    assert c_exponent(1.0, 3.0) == 0.5
    T = 2.0
    assert math.isclose(c_exponent(math.sqrt(T + 1) - 1, T), 0.5, rel_tol=1e-14)
    assert c_exponent(1.0 - 1e-12, 1.0) > 0.999999
    with pytest.raises(ValueError):
        c_exponent(0.0, 1.0)


def test_rate_bound_values():
    assert math.isclose(rate_bound(1e-4, 2, 0.5), 0.11695500084945783, rel_tol=1e-12)
    for d in (1e-2, 1e-5, 1e-9):
        assert math.isclose(rate_bound(d, 2, 1.0), math.sqrt(d), rel_tol=1e-12)
    assert rate_bound(1 - 1e-12, 2, 0.5) > 0.999
    c = c_exponent(0.5, 1.0)
    assert math.isclose(rate_bound(1e-4, 2, c), 0.086875132060081786, rel_tol=1e-12)


deltas = st.floats(1e-12, 1e-2)


@settings(max_examples=200, deadline=None)
@given(delta=deltas, k=st.floats(0.5, 4.0), T=st.floats(0.1, 5.0))
def test_round_trip(delta, k, T):
    if math.log(1 / delta) / k <= 1:
        return
    nu = nu_of_delta(delta, k, T)
    assert math.isclose(math.exp(k * (T + 1) ** nu) * delta, 1.0, rel_tol=1e-10)


@settings(max_examples=200, deadline=None)
@given(delta=deltas, k=st.floats(0.5, 4.0), T=st.floats(0.1, 5.0), frac=st.floats(0.01, 0.99))
def test_weight_identity(delta, k, T, frac):
    if math.log(1 / delta) / k <= 1:
        return
    tau = frac * T
    nu = nu_of_delta(delta, k, T)
    c = c_exponent(tau, T)
    lhs = -2 * (tau + 1) ** nu
    rhs = -(2 / k**c) * math.log(1 / delta) ** c
    assert math.isclose(lhs, rhs, rel_tol=1e-9)


@settings(max_examples=100, deadline=None)
@given(d1=deltas, d2=deltas, c=st.floats(0.05, 1.0))
def test_rate_bound_monotone(d1, d2, c):
    lo, hi = sorted((d1, d2))
    # nearly equal deltas map to the same float bound
    assume(hi > lo * (1 + 1e-6))
    assert rate_bound(lo, 2, c) < rate_bound(hi, 2, c)
    assert rate_bound(lo, 2, c) > rate_bound(lo, 2, min(1.0, c * 1.1)) or c * 1.1 > 1


def test_weight_ratios_monotone():
    ladder = [10.0**-m for m in range(3, 13)]
    tau = math.sqrt(2.0) - 1  # c = 1/2 for T = 1
    rows = weight_ratios(ladder, tau, 1.0, 2.0, 1.0)
    tail = rows[-5:]
    assert all(b["log_ratio_holder"] > a["log_ratio_holder"] for a, b in zip(tail, tail[1:]))
    assert all(b["log_ratio_log"] < a["log_ratio_log"] for a, b in zip(tail, tail[1:]))
    for r in rows:
        assert math.isclose(r["log_weight"], r["log_identity"], rel_tol=1e-9)
    with pytest.raises(ValueError):
        weight_ratios([1e-3, 1e-2], tau, 1.0, 2.0, 1.0)


def test_verify_zero_field():
    g = make_grid(17)
    rep = verify_carleman(g.zeros(), coefficient_preset("heat"))
    assert all(v == 0 for v in rep.lhs + rep.grad_term + rep.data_final)


def test_verify_rejects_boundary_values():
    g = make_grid(17)
    with pytest.raises(ValueError):
        verify_carleman(g.field_from(lambda t, x: 1.0 + 0 * x), coefficient_preset("heat"))


def test_verify_product_functions():
    g = make_grid(33)
    co = coefficient_preset("heat")
    u = g.field_from(lambda t, x: np.sin(np.pi * x) * (1.0 - t))
    rep = verify_carleman(u, co)
    assert rep.empirical_nu0 is not None
    C = [c for n, c in zip(rep.nu_grid, rep.fitted_C) if n >= rep.empirical_nu0]
    assert all(c > 0 for c in C)
    # the ratio dips once (nu = 1 -> 2) while the initial-gradient term still
    # matters, then grows with nu
    tail = C[1:]
    assert all(b >= a for a, b in zip(tail, tail[1:]))
    u2 = g.field_from(lambda t, x: np.sin(np.pi * x) * t)
    rep2 = verify_carleman(u2, co)
    assert rep2.data_final[-1] > rep2.data_final[0]
    assert all(c > 0 for c in rep2.fitted_C)
    assert rep2.to_csv().splitlines()[0] == ",".join(rep2.COLUMNS)


def test_verify_suite_threshold():
    g = make_grid(33)
    co = coefficient_preset("heat")
    nu0 = [verify_carleman(u, co).empirical_nu0 for u in smooth_test_functions(g, 20, 0)]
    assert all(n is not None for n in nu0) and max(nu0) <= 6


def test_test_functions_vanish_on_boundary():
    g = make_grid(9, dim=2)
    for u in smooth_test_functions(g, 3, 1):
        assert isinstance(u, Field)
        assert np.all(u.values[g.boundary_mask] == 0)
