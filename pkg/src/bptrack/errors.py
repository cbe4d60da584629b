"""Exception types shared across the package."""


class TrackingError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(TrackingError):
    """A covariance matrix could not be factorized even after jitter."""


class DimensionMismatch(TrackingError):
    """Vector/matrix shapes are inconsistent with the operation's contract."""


class EmptyWeights(TrackingError):
    """A weight vector with zero total mass was passed where mass is required."""


class TooLarge(TrackingError):
    """Problem size exceeds the exact-enumeration bound."""


class DegenerateProblem(TrackingError):
    """The association problem carries zero total joint mass."""


class FormatVersionMismatch(TrackingError):
    """A file's format or version field is not readable by this build."""


class ShapeMismatch(TrackingError):
    """Stored tensor shapes do not match the configured architecture."""


class ConfigInvalid(TrackingError):
    """A configuration value or key failed validation."""


class MissingWeights(TrackingError):
    """A weights file is required for the requested mode but was not given."""


class SchemaMismatch(TrackingError):
    """A data file does not follow the documented schema."""


class NonFiniteLoss(TrackingError):
    """Training produced a NaN/Inf loss."""
