"""Forward, backward and complex stochastic derivatives: analytic and ensemble backends."""

from .analytic import (
    Kinematics,
    apply_backward,
    apply_forward,
    dmu_analytic,
    forward_backward_analytic,
    kinematics,
    second_derivative_analytic,
    second_derivative_composed,
    transport,
)
from .empirical import (
    diffusion_matrix_estimate,
    dmu_empirical,
    nelson_estimate,
    nested_second_derivative,
    second_derivative_empirical,
)
from .samples import ComplexFieldSample, EstimatorConfig, make_sites, reconstruct

__all__ = [
    "ComplexFieldSample",
    "EstimatorConfig",
    "Kinematics",
    "apply_backward",
    "apply_forward",
    "diffusion_matrix_estimate",
    "dmu_analytic",
    "dmu_empirical",
    "forward_backward_analytic",
    "kinematics",
    "make_sites",
    "nelson_estimate",
    "nested_second_derivative",
    "reconstruct",
    "second_derivative_analytic",
    "second_derivative_composed",
    "second_derivative_empirical",
    "transport",
]
