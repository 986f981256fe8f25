import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revtime.forward import add_noise, extract_final, generate_data
from revtime.grid import Field, NormKind, discrete_norm
from revtime.model import coefficient_preset, lift, nonlinearity_preset
from revtime.problems import make_problem
from revtime.qrm import (QrmConfig, assemble_qrm, free_values, linear_residual_operator,
                         minimize_qrm, run_noise_ladder)

from conftest import make_grid

HEAT = coefficient_preset("heat")
ZERO = nonlinearity_preset("zero")


def heat_truth(n=17, T=0.1):
    g = make_grid(n, T=T)
    fp = make_problem(g, "heat", {}, "zero", {}, "sine")
    return generate_data(fp, g, refine=2)


def _dt_edge(a, h, axis):
    return np.gradient(a, h, axis=axis, edge_order=2)


def _dd(a, h, axis):
    """Three-point second difference with four-point one-sided ends."""
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[:-2] - 2 * a[1:-1] + a[2:]) / h**2
    out[0] = (2 * a[0] - 5 * a[1] + 4 * a[2] - a[3]) / h**2
    out[-1] = (2 * a[-1] - 5 * a[-2] + 4 * a[-3] - a[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def _trap(n, h):
    w = np.full(n, h)
    w[[0, -1]] *= 0.5
    return w


def oracle_J(v, g_space, alpha, kappa=1.0):
    """Heat-equation QRM functional by direct quadrature on node arrays (1-D)."""
    grid = v.grid
    dt, h = grid.dt, grid.h[0]
    W = np.outer(_trap(grid.nt, dt), _trap(grid.nx[0], h))
    u = v.values
    gxx = np.zeros_like(g_space)
    gxx[1:-1] = (g_space[:-2] - 2 * g_space[1:-1] + g_space[2:]) / h**2
    r = _dt_edge(u, dt, 0) - kappa * _dd(u, h, 1) - kappa * gxx[None, :]
    r[:, [0, -1]] = 0.0
    misfit = np.sum(W * r**2)
    ut, ux = _dt_edge(u, dt, 0), _dt_edge(u, h, 1)
    pen = sum(np.sum(W * d**2) for d in (u, ut, ux, _dd(u, dt, 0), _dd(u, h, 1), _dt_edge(ux, dt, 0)))
    return misfit + alpha * pen


def _random_admissible(grid, rng):
    vals = np.zeros(grid.shape)
    vals[grid.free_mask] = rng.standard_normal(int(grid.free_mask.sum()))
    return Field(grid, vals)


def test_zero_data_gives_zero_solution():
    g = make_grid(9, T=0.1)
    prob = lift(HEAT, ZERO, g.space_field_from(lambda x: 0.0 * x))
    assert not np.any(prob.q.values)
    sol = minimize_qrm(assemble_qrm(prob, QrmConfig(alpha=1e-4)), QrmConfig(alpha=1e-4))
    assert not np.any(sol.v_min.values)


def test_objective_matches_quadrature_oracle(rng):
    g = make_grid(9, T=0.2)
    gs = g.space_field_from(lambda x: np.sin(np.pi * x) + 0.3 * np.sin(2 * np.pi * x))
    gs.values[[0, -1]] = 0.0
    prob = lift(HEAT, ZERO, gs)
    for alpha in (1e-2, 0.5):
        h = assemble_qrm(prob, QrmConfig(alpha=alpha))
        for _ in range(3):
            v = _random_admissible(g, rng)
            ref = oracle_J(v, gs.values, alpha)
            assert abs(h.objective(v) - ref) <= 1e-10 * ref


def test_objective_gradient_consistent(rng):
    g = make_grid(9, T=0.2)
    prob = lift(HEAT, ZERO, g.space_field_from(lambda x: np.sin(np.pi * x)))
    h = assemble_qrm(prob, QrmConfig(alpha=1e-2))
    v = rng.standard_normal(h.n_free)
    d = rng.standard_normal(h.n_free)
    eps = 1e-5
    fd = (h.objective(v + eps * d) - h.objective(v - eps * d)) / (2 * eps)
    assert abs(fd - h.gradient(v) @ d) <= 1e-7 * abs(fd)


def test_lifted_truth_solves_equation_to_truncation():
    u = heat_truth(33)
    prob = lift(HEAT, ZERO, extract_final(u))
    K = linear_residual_operator(prob)
    r = K @ prob.v_of(u).flat - prob.q.flat
    rows = u.grid.interior_mask.ravel()
    assert np.max(np.abs(r[rows])) < 0.2


def test_alpha_invariant():
    for bad in (0.0, 1.0, -1e-3, 2.0):
        with pytest.raises(ValueError):
            QrmConfig(alpha=bad)
    g = make_grid(9, T=0.1)
    prob = lift(HEAT, ZERO, g.space_field_from(lambda x: np.sin(np.pi * x)))
    with pytest.raises(ValueError):
        assemble_qrm(prob, QrmConfig(), alpha=1.0)
    assert QrmConfig(alpha_rule="delta_squared").alpha_for(1e-3) == pytest.approx(1e-6)


def test_rejects_nonlinear():
    g = make_grid(9, T=0.1)
    prob = lift(HEAT, nonlinearity_preset("sin", scale=0.5), g.space_field_from(lambda x: np.sin(np.pi * x)))
    with pytest.raises(ValueError):
        assemble_qrm(prob, QrmConfig())


def test_free_values_rejects_constraint_violation(grid17):
    v = grid17.zeros()
    v.values[-1, 3] = 1e-3
    with pytest.raises(ValueError):
        free_values(v)


def test_normal_matrix_spd(rng):
    g = make_grid(9, T=0.1)
    prob = lift(coefficient_preset("drift"), ZERO, g.space_field_from(lambda x: np.sin(np.pi * x)))
    A = assemble_qrm(prob, QrmConfig(alpha=1e-3)).normal_matrix
    assert abs(A - A.T).max() == 0.0
    for _ in range(50):
        x = rng.standard_normal(A.shape[0])
        assert x @ (A @ x) > 0


def test_two_cg_starts_and_direct_agree(rng):
    u = heat_truth(17)
    cfg = QrmConfig(alpha=1e-6, cg_tol=1e-10)
    prob = lift(HEAT, ZERO, extract_final(u))
    h = assemble_qrm(prob, cfg)
    a = minimize_qrm(h, cfg)
    b = minimize_qrm(h, cfg, x0=rng.standard_normal(h.n_free))
    d = minimize_qrm(h, cfg, solver="direct")
    ref = discrete_norm(d.v_min, NormKind.hk(2))
    assert discrete_norm(a.v_min - b.v_min, NormKind.hk(2)) <= 10 * cfg.cg_tol * ref
    assert discrete_norm(a.v_min - d.v_min, NormKind.hk(2)) <= 10 * cfg.cg_tol * ref
    assert a.identity_residual <= cfg.cg_tol * 1.0001
    assert a.residual_history[0] >= a.residual_history[-1]


def test_minimizer_optimal_against_perturbations(rng):
    u = heat_truth(9)
    cfg = QrmConfig(alpha=1e-4)
    h = assemble_qrm(lift(HEAT, ZERO, extract_final(u)), cfg)
    sol = minimize_qrm(h, cfg, solver="direct")
    x = free_values(sol.v_min)
    J0 = h.objective(x)
    for _ in range(100):
        p = rng.standard_normal(h.n_free) * 10.0 ** rng.uniform(-6, 0)
        assert h.objective(x + p) >= J0 * (1 - 1e-12)


def test_penalty_norm_decreases_with_alpha():
    u = heat_truth(17)
    g = add_noise(extract_final(u), 1e-2, 0)
    prob = lift(HEAT, ZERO, g)
    norms = []
    for alpha in (1e-8, 1e-6, 1e-4, 1e-2):
        cfg = QrmConfig(alpha=alpha, solver="direct")
        norms.append(minimize_qrm(assemble_qrm(prob, cfg), cfg).h2_norm)
    assert all(b <= a * (1 + 1e-9) for a, b in zip(norms, norms[1:]))


def test_ladder_rows_sorted_and_complete():
    u = heat_truth(17)
    cfg = QrmConfig(alpha_rule="delta_squared", solver="direct")
    tab = run_noise_ladder(HEAT, ZERO, u, [1e-2, 1e-3, 1e-4], cfg, seeds=(0, 1))
    assert len(tab.rows) == 6 and not tab.failures
    keys = [(-r.delta, r.tau, r.seed) for r in tab.rows]
    assert keys == sorted(keys)
    assert all(r.alpha == pytest.approx(r.delta**2) for r in tab.rows)
    assert all(r.implied_C == pytest.approx(r.error_h10 / r.bound) for r in tab.rows)
    noisy = min(r.error_h10 for r in tab.rows if r.delta == 1e-2)
    assert tab.baseline["errors"][0.025] <= noisy
    assert tab.to_csv().splitlines()[0].split(",")[0] == "delta"
    with pytest.raises(ValueError):
        run_noise_ladder(HEAT, ZERO, u, [1e-3, 1e-2], cfg)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_quadratic_identity(seed):
    """J(x + p) - J(x) = grad(x).p + p^T A p for the assembled quadratic."""
    rng = np.random.default_rng(seed)
    g = make_grid(9, T=0.1)
    h = assemble_qrm(lift(HEAT, ZERO, g.space_field_from(lambda x: np.sin(np.pi * x))), QrmConfig(alpha=1e-3))
    x, p = rng.standard_normal(h.n_free), rng.standard_normal(h.n_free)
    lhs = h.objective(x + p) - h.objective(x)
    rhs = h.gradient(x) @ p + p @ (h.normal_matrix @ p)
    assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), h.objective(x))
