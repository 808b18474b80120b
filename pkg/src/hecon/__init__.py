"""Bayesian cost-effectiveness analysis of longitudinal trial data with
nonignorable missingness.

Submodules:
    data            trial CSV/JSON parsing, response patterns, rescaling, grouping
    hurdle          two-part hurdle model likelihood and simulation
    mcmc            posterior sampling and convergence diagnostics
    extrapolation   sensitivity parameters and identified marginal means
    econ            QALY/cost summaries, ICER, CEAC, cost-effectiveness plane
    assessment      observed-data DIC and posterior predictive checks
    synthetic       synthetic trial generator with known truth
    cli             command-line entry points
"""

__version__ = "0.1.0"

from .errors import (
    AssessmentError,
    ConfigError,
    EconError,
    FeasibilityError,
    FitError,
    HeconError,
    ParseError,
    SchemaError,
    ScaleMismatchError,
    SimulationError,
    ValidationError,
)

__all__ = [
    "__version__",
    "AssessmentError",
    "ConfigError",
    "EconError",
    "FeasibilityError",
    "FitError",
    "HeconError",
    "ParseError",
    "SchemaError",
    "ScaleMismatchError",
    "SimulationError",
    "ValidationError",
]
