"""Controllability tests for driftless control-affine systems.

The sub-Laplacian of a family of vector fields is discretized on a grid;
its spectral gap certifies controllability, its near-kernel exposes
invariant sets, and its inverse drives densities between two targets.
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    DensityBoundError,
    DimensionMismatchError,
    DomainError,
    EvaluationError,
    ExpressionSyntaxError,
    NotControllableError,
    SubctrlError,
)
from .fields import (
    BUILTIN_NAMES,
    VectorFieldSet,
    builtin_fields,
    eval_fields,
    fields_from_expressions,
    parse_field_config,
    serialize_fields,
    zero_fields,
)
from .grid import DensityField, GridDomain, build_grid, interpolate, quad_weights
from .operators import DiscreteOperator, apply_operator, assemble_directional, assemble_form_operator
from .spectral import SpectralReport, kernel_basis, poincare_ratio, solve_poisson, spectral_gap
from .control import (
    ControlField,
    continuity_residual,
    energy_bound,
    steering_controls,
    steering_potential,
    tracking_controls,
)
from .transport import (
    ParticleEnsemble,
    ReachabilityReport,
    density_distance,
    detect_invariant_sets,
    integrate_ensemble,
    invariance_defect,
    reach_experiment,
    sample_density,
)

__version__ = "0.1.0"
