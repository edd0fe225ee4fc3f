"""Reiterated homogenization toolkit for divergence-form elliptic operators.

Cascaded periodic cell problems turn a coefficient oscillating on several
well-separated scales into one effective tensor; correctors, two-scale
approximants, and certificate probes quantify how well the homogenized
model tracks the oscillating one.
"""

__version__ = "0.1.0"

from .cell import CellProblem, CorrectorSet, EffectiveTensor
from .coeff import (
    CoefficientField,
    CoefficientSpec,
    ScaleLadder,
    builtin_family,
    check_separation,
)
from .config import ExperimentConfig, parse_config
from .dirichlet import BVP, solve_homogenized, solve_multiscale, two_scale_expansion
from .errors import (
    CompatibilityError,
    ConfigError,
    ReiterateError,
    ResolutionError,
    SolverFailure,
)
from .grid import Grid, GridFunction
from .cascade import CascadeResult, homogenize_all

__all__ = [
    "BVP",
    "CascadeResult",
    "CellProblem",
    "CoefficientField",
    "CoefficientSpec",
    "CompatibilityError",
    "ConfigError",
    "CorrectorSet",
    "EffectiveTensor",
    "ExperimentConfig",
    "Grid",
    "GridFunction",
    "ReiterateError",
    "ResolutionError",
    "ScaleLadder",
    "SolverFailure",
    "builtin_family",
    "check_separation",
    "homogenize_all",
    "parse_config",
    "solve_homogenized",
    "solve_multiscale",
    "two_scale_expansion",
    "__version__",
]
