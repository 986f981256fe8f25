import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revtime.grid import Field, NormKind, SpaceField, discrete_norm
from revtime.model import (NONLINEARITY_PRESETS, BoundaryCompatibilityError, CoefficientSet,
                           EllipticityError, apply_A, apply_L, check_ellipticity,
                           coefficient_preset, estimate_lipschitz, lift, nonlinearity_preset)

from conftest import make_grid


def _interior(g):
    return g.interior_mask


def test_L_exact_on_quadratics(grid17):
    u = grid17.field_from(lambda t, x: x**2 + 0 * t)
    Lu = apply_L(coefficient_preset("heat"), u)
    assert np.allclose(Lu.values[_interior(grid17)], 2.0)


def test_L_time_dependent_coefficient(grid17):
    co = coefficient_preset("affine_t", a0=1.0, a1=1.0, T=1.0)
    u = grid17.field_from(lambda t, x: 0.5 * x**2 + 0 * t)
    Lu = apply_L(co, u)
    assert np.allclose(Lu.values, 1.0 + grid17.mesh[0], atol=1e-9)


def test_L_sine_order():
    errs = []
    for n in (17, 33, 65):
        g = make_grid(n, nt=5)
        u = g.field_from(lambda t, x: np.sin(np.pi * x) + 0 * t)
        Lu = apply_L(coefficient_preset("heat"), u)
        errs.append(np.max(np.abs(Lu.values + np.pi**2 * np.sin(np.pi * g.mesh[1]))))
    assert np.polyfit(np.log([4, 2, 1]), np.log(errs), 1)[0] >= 1.9


def test_A_examples(grid17):
    co = coefficient_preset("constant", b=0.0, c=1.0)
    u = grid17.field_from(lambda t, x: np.cos(3 * x) * (1 + t))
    assert np.allclose(apply_A(co, u).values, u.values)
    co = coefficient_preset("constant", b=1.0, c=0.0)
    u = grid17.field_from(lambda t, x: x + 0 * t)
    assert np.allclose(apply_A(co, u).values, 1.0)


def test_A_drift_order():
    errs = []
    co = coefficient_preset("drift")
    for n in (17, 33, 65):
        g = make_grid(n, nt=5)
        t, x = g.mesh
        u = g.field_from(lambda t, x: np.sin(np.pi * x) + 0 * t)
        ex = t * np.pi * np.cos(np.pi * x) + x * np.sin(np.pi * x)
        errs.append(np.max(np.abs(apply_A(co, u).values - ex)))
    assert np.polyfit(np.log([4, 2, 1]), np.log(errs), 1)[0] >= 1.9


def test_ellipticity(grid17):
    rep = check_ellipticity(coefficient_preset("heat"), grid17)
    assert rep.passed and rep.min_eig == rep.max_eig == 1.0
    rep = check_ellipticity(coefficient_preset("trigonometric"), make_grid(33))
    assert rep.passed and 1.0 <= rep.min_eig and rep.max_eig <= 3.0
    bad = CoefficientSet(1, lambda t, x: -np.ones((1, 1) + np.shape(t)),
                         lambda t, x: np.zeros((1,) + np.shape(t)), lambda t, x: 0 * t,
                         lambda t, x: 0 * t, 1.0, 1.0, "bad")
    rep = check_ellipticity(bad, grid17)
    assert not rep.passed and rep.max_eig == -1.0
    with pytest.raises(EllipticityError, match="node"):
        check_ellipticity(bad, grid17, raise_on_fail=True)


def test_ellipticity_2d():
    g = make_grid(9, dim=2)
    assert check_ellipticity(coefficient_preset("trigonometric", dim=2), g, samples=50).passed


def test_lipschitz_estimates():
    box = [(-3.0, 3.0), (-np.pi, np.pi)]
    assert estimate_lipschitz(nonlinearity_preset("zero"), box) == 0.0
    est = estimate_lipschitz(nonlinearity_preset("sin"), box, trials=10_000)
    assert 0.95 <= est <= 1.0
    lin = nonlinearity_preset("linear", b=[np.sqrt(2.0)], c=np.sqrt(2.0))
    est = estimate_lipschitz(lin, [(-1, 1), (-1, 1)], trials=10_000)
    assert abs(est - 2.0) < 1e-3 and est <= 2.0 * (1 + 1e-9)


@pytest.mark.parametrize("name", NONLINEARITY_PRESETS)
def test_lipschitz_below_declared(name):
    F = nonlinearity_preset(name)
    for dim in (1, 2):
        box = [(-5.0, 5.0)] * dim + [(-5.0, 5.0)]
        assert estimate_lipschitz(F, box, trials=5000, seed=dim) <= F.lipschitz_C * (1 + 1e-9)


@pytest.mark.parametrize("name", NONLINEARITY_PRESETS)
def test_nonlinearity_partials(name, rng):
    F = nonlinearity_preset(name)
    grad = rng.standard_normal((2, 50))
    u = rng.standard_normal(50)
    t = np.zeros(50)
    eps = 1e-6
    du = (F.value(grad, u + eps, t, t, t) - F.value(grad, u - eps, t, t, t)) / (2 * eps)
    assert np.allclose(du, F.d_u(grad, u, t, t, t), atol=1e-8)
    for j in range(2):
        e = np.zeros_like(grad)
        e[j] = eps
        dg = (F.value(grad + e, u, t, t, t) - F.value(grad - e, u, t, t, t)) / (2 * eps)
        assert np.allclose(dg, F.d_grad(grad, u, t, t, t)[j], atol=1e-8)


def test_unknown_presets():
    with pytest.raises(KeyError):
        coefficient_preset("nope")
    with pytest.raises(KeyError):
        nonlinearity_preset("square")


def test_lift_zero_data(grid17, rng):
    F = nonlinearity_preset("sin", scale=0.5)
    co = coefficient_preset("heat")
    P = lift(co, F, grid17.space_field_from(lambda x: 0 * x))
    v = Field(grid17, rng.standard_normal(grid17.size))
    grad = np.stack([D @ v.flat for D in grid17.gradient_matrices()])
    assert np.allclose(P.G(v), F.value(grad, v.flat, *[m.ravel() for m in grid17.mesh]))
    assert np.array_equal(P.reconstruct(v).values, v.values)


def test_lift_q_is_laplacian_of_data():
    errs = []
    for n in (17, 33, 65):
        g = make_grid(n, nt=5)
        P = lift(coefficient_preset("heat"), nonlinearity_preset("zero"),
                 g.space_field_from(lambda x: np.sin(np.pi * x)))
        ex = -np.pi**2 * np.sin(np.pi * g.mesh[1])
        errs.append(np.max(np.abs(P.q.values - ex)))
    assert np.polyfit(np.log([4, 2, 1]), np.log(errs), 1)[0] >= 1.9


def test_lift_round_trip_and_constraints(grid17, rng):
    g = grid17.space_field_from(lambda x: np.sin(np.pi * x))
    g.values[[0, -1]] = 0.0
    P = lift(coefficient_preset("heat"), nonlinearity_preset("zero"), g)
    u = Field(grid17, rng.standard_normal(grid17.size))
    # (u - g) + g reproduces u up to one rounding per entry
    assert np.allclose(P.reconstruct(P.v_of(u)).values, u.values, rtol=0, atol=1e-15 * 8)
    u = grid17.field_from(lambda t, x: np.sin(np.pi * x) * (2 - t))
    u.values[-1] = g.values
    u.values[:, [0, -1]] = 0.0
    v = P.v_of(u)
    assert np.all(v.values[-1] == 0.0)
    assert np.all(v.values[grid17.boundary_mask] == 0.0)


def test_lift_rejects_incompatible_data(grid17):
    with pytest.raises(BoundaryCompatibilityError):
        lift(coefficient_preset("heat"), nonlinearity_preset("zero"),
             grid17.space_field_from(lambda x: 1.0 + 0 * x))


def test_linear_G_matches_q(grid17, rng):
    co = coefficient_preset("drift")
    F = nonlinearity_preset("linear", b=[0.3], c=-0.2)
    P = lift(co, F, grid17.space_field_from(lambda x: np.sin(np.pi * x)))
    from revtime.model import A_matrix
    v = Field(grid17, rng.standard_normal(grid17.size))
    Nv = np.stack([D @ v.flat for D in grid17.gradient_matrices()])
    lin = A_matrix(co, grid17) @ v.flat + 0.3 * Nv[0] - 0.2 * v.flat
    assert np.allclose(P.G(v), P.q.flat + lin, atol=1e-10)


_G = make_grid(9)
_co = coefficient_preset("trigonometric")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_operators_linear(seed, a, b):
    r = np.random.default_rng(seed)
    u = Field(_G, r.standard_normal(_G.size))
    v = Field(_G, r.standard_normal(_G.size))
    for op in (apply_L, apply_A):
        lhs = op(_co, u * a + v * b).values
        rhs = a * op(_co, u).values + b * op(_co, v).values
        assert np.allclose(lhs, rhs, rtol=1e-11, atol=1e-8)


def test_boundary_check_scale(grid17):
    s = SpaceField(grid17, np.zeros(17))
    assert discrete_norm(s, NormKind.l2_space()) == 0.0
    P = lift(coefficient_preset("heat"), nonlinearity_preset("zero"), s)
    assert np.all(P.q.values == 0.0)
