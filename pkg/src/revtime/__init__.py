"""Reconstruction of parabolic solutions from final-time data.

Modules: ``grid`` (space-time discretization and norms), ``model``
(coefficients, nonlinearities, lifting), ``carleman`` (weights and rate
formulas), ``forward`` (data generation), ``qrm`` (quasi-reversibility),
``convexify`` (Carleman-weighted functional and gradient projection),
``experiments``/``cli`` (config-driven runs).
"""

from .grid import Field, Grid, GridSpec, NormKind, SpaceField, build_grid, discrete_norm
from .model import coefficient_preset, lift, nonlinearity_preset

__version__ = "0.1.0"

__all__ = [
    "Field",
    "Grid",
    "GridSpec",
    "NormKind",
    "SpaceField",
    "build_grid",
    "discrete_norm",
    "coefficient_preset",
    "lift",
    "nonlinearity_preset",
]
