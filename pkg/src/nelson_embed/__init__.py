"""Stochastic embedding of Lagrangian systems.

Symbolic fields, diffusion path ensembles, Nelson's forward, backward and
complex derivatives (closed form and from samples), embedded operators and
Euler-Lagrange/Newton residuals, and the bridge to the Schrodinger equation.
"""

from . import errors
from .embed import (
    DifferentialOperatorSpec,
    EmbeddedOperator,
    Lagrangian,
    ResidualReport,
    apply_embedded,
    conjecture_probe,
    default_sites,
    embed_operator,
    euler_lagrange_residual,
    functoriality_gap,
    newton_residual,
)
from .fields import FieldExpr, TabulatedField, check_admissible, differentiate, evaluate, parse_field
from .nelson import (
    ComplexFieldSample,
    EstimatorConfig,
    dmu_analytic,
    dmu_empirical,
    forward_backward_analytic,
    make_sites,
    nelson_estimate,
    nested_second_derivative,
    reconstruct,
    second_derivative_analytic,
    second_derivative_empirical,
    transport,
)
from .process import (
    DiffusionModel,
    Gaussian,
    PathEnsemble,
    PointMass,
    Samples,
    SdeSpec,
    TimeGrid,
    brownian_motion,
    embed_deterministic,
    excited_oscillator,
    free_gaussian_packet,
    kde_density,
    ornstein_uhlenbeck,
    simulate,
)
from .schrodinger import (
    SpatialGrid,
    WaveFunction,
    correspondence_check,
    density_match,
    evolve,
    nelson_map,
    solve_eigenstates,
)

__all__ = [
    "ComplexFieldSample", "DiffusionModel", "DifferentialOperatorSpec", "EmbeddedOperator", "EstimatorConfig",
    "FieldExpr", "Gaussian", "Lagrangian", "PathEnsemble", "PointMass", "ResidualReport", "Samples", "SdeSpec",
    "SpatialGrid", "TabulatedField", "TimeGrid", "WaveFunction", "apply_embedded", "brownian_motion",
    "check_admissible", "conjecture_probe", "correspondence_check", "default_sites", "density_match",
    "differentiate", "dmu_analytic", "dmu_empirical", "embed_deterministic", "embed_operator", "errors",
    "euler_lagrange_residual", "evaluate", "evolve", "excited_oscillator", "forward_backward_analytic",
    "free_gaussian_packet", "functoriality_gap", "kde_density", "make_sites", "nelson_estimate", "nelson_map",
    "nested_second_derivative", "newton_residual", "ornstein_uhlenbeck", "parse_field", "reconstruct",
    "second_derivative_analytic", "second_derivative_empirical", "simulate", "solve_eigenstates", "transport",
]
