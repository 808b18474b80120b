"""Exception types shared across the package."""


class HeconError(Exception):
    """Base class for all package errors."""


class SchemaError(HeconError):
    """A required column or field is absent or malformed."""


class ParseError(HeconError):
    """A cell could not be parsed; message cites row and column."""


class ValidationError(HeconError):
    """Parsed data violate a structural constraint."""


class FeasibilityError(HeconError):
    """Beta mean/sd pair outside the feasible moment region."""


class SimulationError(HeconError):
    """Trajectory simulation exhausted its retry budget."""


class FitError(HeconError):
    """Sampler could not be configured or started."""


class ScaleMismatchError(HeconError):
    """Quantities on different measurement scales were combined."""


class EconError(HeconError):
    """Economic summary undefined for the given draws."""


class AssessmentError(HeconError):
    """Model-assessment inputs are inconsistent."""


class ConfigError(HeconError):
    """Run configuration is missing or inconsistent."""
