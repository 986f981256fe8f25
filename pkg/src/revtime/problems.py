"""Named test problems: coefficients, nonlinearity and initial state."""

from __future__ import annotations

import numpy as np

from .forward import ForwardProblem
from .grid import Field, Grid
from .model import coefficient_preset, nonlinearity_preset

__all__ = [
    "PROBLEM_PRESETS",
    "INITIAL_STATES",
    "initial_state",
    "make_problem",
    "smooth_test_functions",
]

PROBLEM_PRESETS = {
    "heat": {"coefficients": "heat", "coefficient_params": {}, "nonlinearity": "zero",
             "nonlinearity_params": {}, "initial": "sine"},
    "drift": {"coefficients": "drift", "coefficient_params": {}, "nonlinearity": "zero",
              "nonlinearity_params": {}, "initial": "sine"},
    "trigonometric": {"coefficients": "trigonometric", "coefficient_params": {},
                      "nonlinearity": "zero", "nonlinearity_params": {}, "initial": "sine"},
    "sin": {"coefficients": "heat", "coefficient_params": {"kappa": 0.1}, "nonlinearity": "sin",
            "nonlinearity_params": {"scale": 0.5}, "initial": "sine"},
    "rational": {"coefficients": "heat", "coefficient_params": {"kappa": 0.1},
                 "nonlinearity": "rational", "nonlinearity_params": {"scale": 0.5},
                 "initial": "sine"},
    "gradnorm": {"coefficients": "heat", "coefficient_params": {"kappa": 0.1},
                 "nonlinearity": "gradnorm", "nonlinearity_params": {"scale": 0.5, "eps": 0.1},
                 "initial": "sine"},
}


def _sine(lengths):
    def fn(*x):
        out = 1.0
        for xi, ell in zip(x, lengths):
            out = out * np.sin(np.pi * xi / ell)
        return out
    return fn


def _two_mode(lengths):
    def fn(*x):
        out = 1.0
        for xi, ell in zip(x, lengths):
            out = out * (np.sin(np.pi * xi / ell) + 0.5 * np.sin(2 * np.pi * xi / ell))
        return out
    return fn


def _poly(lengths):
    def fn(*x):
        out = 1.0
        for xi, ell in zip(x, lengths):
            out = out * 4.0 * xi * (ell - xi) / ell**2
        return out
    return fn


INITIAL_STATES = {"sine": _sine, "two_mode": _two_mode, "poly": _poly}


def initial_state(name: str, lengths):
    try:
        return INITIAL_STATES[name](tuple(lengths))
    except KeyError:
        raise KeyError(f"unknown initial state {name!r}; choose from {sorted(INITIAL_STATES)}") from None


def make_problem(grid: Grid, coefficients: str, coefficient_params: dict, nonlinearity: str,
                 nonlinearity_params: dict, initial: str) -> ForwardProblem:
    params = dict(coefficient_params)
    if coefficients == "affine_t":
        params.setdefault("T", grid.T)
    coeffs = coefficient_preset(coefficients, grid.dim, **params)
    F = nonlinearity_preset(nonlinearity, **nonlinearity_params)
    return ForwardProblem(coeffs, F, initial_state(initial, grid.spec.box_lengths))


def smooth_test_functions(grid: Grid, count: int, seed: int):
    """Random smooth fields vanishing on the lateral boundary.

    Each is ``sum_j psi_j(t) prod_i sin(m_ij pi x_i / l_i)`` with two or three
    spatial modes ``m <= 3`` and time profiles mixing a quadratic and an
    exponential.
    """
    rng = np.random.default_rng(seed)
    lengths = grid.spec.box_lengths
    out = []
    for _ in range(count):
        total = np.zeros(grid.shape)
        for _ in range(int(rng.integers(2, 4))):
            modes = rng.integers(1, 4, size=grid.dim)
            coef = rng.standard_normal(4)
            lam = rng.uniform(-2.0, 2.0)

            def fn(t, *x, modes=modes, coef=coef, lam=lam):
                psi = coef[0] + coef[1] * t + coef[2] * t**2 + coef[3] * np.exp(lam * t)
                s = 1.0
                for xi, m, ell in zip(x, modes, lengths):
                    s = s * np.sin(m * np.pi * xi / ell)
                return psi * s

            total += grid.field_from(fn).values
        total[grid.boundary_mask] = 0.0
        out.append(Field(grid, total))
    return out
