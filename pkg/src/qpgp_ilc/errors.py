"""Exception types shared across the package."""


class QpgpIlcError(Exception):
    """Base class for all library errors."""


class ParameterError(QpgpIlcError, ValueError):
    """A scalar parameter is outside its admissible range."""


class ShapeError(QpgpIlcError, ValueError):
    """Array arguments have inconsistent or invalid shapes."""


class NumericalError(QpgpIlcError, RuntimeError):
    """A linear-algebra step failed (singular system, failed factorization)."""


class InsufficientDataError(QpgpIlcError, ValueError):
    """Not enough observations for the requested estimate."""


class ConfigError(QpgpIlcError, ValueError):
    """Invalid experiment or fit configuration."""
