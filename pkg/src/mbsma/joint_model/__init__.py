"""Shared-random-effect joint models: specification, likelihood and fitting."""

from .design import DesignData, design_from_dataset, design_from_histories
from .fitting import (FitError, FitOptions, FittedJointModel, InitializationError,
                      NoEventsError, fit, initial_theta)
from .likelihood import QuadratureError, joint_loglik, marginal_loglik
from .model import (BINARY, DEFAULT_PIECES, GAUSSIAN, MAX_RE_DIM, CapabilityError,
                    MarkerFamily, ModelError, ModelSpec, ParameterVector, cumulative_hazard,
                    default_knots, hazard, layout, linear_predictor, load_spec, marker_loglik,
                    survival)

__all__ = [
    "BINARY", "CapabilityError", "DEFAULT_PIECES", "DesignData", "FitError", "FitOptions",
    "FittedJointModel", "GAUSSIAN", "InitializationError", "MAX_RE_DIM", "MarkerFamily",
    "ModelError", "ModelSpec", "NoEventsError", "ParameterVector", "QuadratureError",
    "cumulative_hazard", "default_knots", "design_from_dataset", "design_from_histories", "fit",
    "hazard", "initial_theta", "joint_loglik", "layout", "linear_predictor", "load_spec",
    "marginal_loglik", "marker_loglik", "survival",
]
