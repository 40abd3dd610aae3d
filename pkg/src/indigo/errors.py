"""Exception types raised across the package."""


class IndigoError(Exception):
    pass


class ShapeError(IndigoError, ValueError):
    """Input dimensions do not fit the model or operation."""


class ZeroNormError(IndigoError, ValueError):
    """A vector that must be l2-normalized has zero norm."""


class UnknownTokenError(IndigoError, KeyError):
    pass


class ConfigError(IndigoError, ValueError):
    pass


class DivergenceError(IndigoError, RuntimeError):
    """Training produced a non-finite loss or gradient."""
