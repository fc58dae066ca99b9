"""geoflow: diffeomorphic image registration and network geometry tools."""

__version__ = "0.1.0"

from .fields import (
    DeformationMap,
    Grid,
    ScalarField,
    TimePath,
    VectorField,
    compose,
    div,
    grad,
    identity_map,
    invert,
    jacobian_det,
    sample,
)
from .kernel import SobolevKernel, apply_K, apply_L, metric_inner, metric_norm_sq
from .lddmm import RegistrationProblem, RegistrationResult, register
from .metamorphosis import morph_energy, morph_register
from .shooting import shoot_energy, shoot_forward, shoot_gradient, register_shooting
from .transport import FlowMaps, advect, continuity, integrate_flow
from .fieldio import read_field, read_pgm, unit_grid, write_field, write_pgm

__all__ = [
    "__version__",
    "Grid",
    "ScalarField",
    "VectorField",
    "DeformationMap",
    "TimePath",
    "sample",
    "grad",
    "div",
    "compose",
    "invert",
    "jacobian_det",
    "identity_map",
    "SobolevKernel",
    "apply_L",
    "apply_K",
    "metric_inner",
    "metric_norm_sq",
    "FlowMaps",
    "integrate_flow",
    "advect",
    "continuity",
    "RegistrationProblem",
    "RegistrationResult",
    "register",
    "shoot_forward",
    "shoot_energy",
    "shoot_gradient",
    "register_shooting",
    "morph_energy",
    "morph_register",
    "read_pgm",
    "write_pgm",
    "read_field",
    "write_field",
    "unit_grid",
]
