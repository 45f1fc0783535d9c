"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array arguments have incompatible or invalid shapes."""


class InsufficientSampleError(ValueError):
    """An operation needs more ensemble members than were provided."""


class DegenerateEnsembleError(ValueError):
    """An ensemble carries no usable spread (e.g. a difference pair v == w)."""
