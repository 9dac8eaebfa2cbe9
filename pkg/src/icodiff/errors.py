"""Package-wide error types."""


class NumericalFault(RuntimeError):
    """Non-finite values encountered during training or sampling."""


class DegenerateReferenceError(ValueError):
    """Reference sample set has (near) zero variance in some ROI."""
