"""Invariant densities, transfer operators and statistics of piecewise convex interval maps."""

__version__ = "0.1.0"

from .maps import (  # noqa: E402
    Branch,
    ClassReport,
    PiecewiseMap,
    TailDescriptor,
    apply,
    builtin,
    first_return_map,
    iterate_partition,
    load_map,
    mesh_decay,
    min_slope_certificate,
    preimages,
    validate,
)
from .transfer import StepDensity, StepFunction, fp_pointwise, fp_step, ly_constants  # noqa: E402

__all__ = [
    "Branch",
    "ClassReport",
    "PiecewiseMap",
    "StepDensity",
    "StepFunction",
    "TailDescriptor",
    "apply",
    "builtin",
    "first_return_map",
    "fp_pointwise",
    "fp_step",
    "iterate_partition",
    "load_map",
    "ly_constants",
    "mesh_decay",
    "min_slope_certificate",
    "preimages",
    "validate",
]
