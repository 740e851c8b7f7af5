"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when shapes, layer orders or flags are inconsistent."""


class DataError(ValueError):
    """Raised for malformed datasets or labels outside the class set."""


class NumericalError(FloatingPointError):
    """Raised when a non-finite value shows up in a forward or backward pass."""
