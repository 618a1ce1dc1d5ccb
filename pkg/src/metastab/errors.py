"""Exception hierarchy shared by the numerical modules."""


class MetastabError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(MetastabError, ValueError):
    """A map parameter lies outside its admissible domain."""


class DomainError(MetastabError, ValueError):
    """A point lies outside the domain of the requested operation."""


class AmbiguityError(MetastabError, ValueError):
    """A one-sided quantity was requested at a partition point without a side."""


class RangeError(MetastabError, ValueError):
    """A value lies outside the image of the branch being inverted."""


class UnresolvedRegionError(MetastabError, ValueError):
    """A point falls in the truncated neighbourhood of 3/8 where cylinders are not built."""


class NumericalError(MetastabError, ArithmeticError):
    """An iterative method failed to reach its tolerance."""


class ConvergenceError(NumericalError):
    """Power iteration did not converge; ``residual`` holds the last residual."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class TruncationError(NumericalError):
    """A series or cylinder truncation left a remainder above its allowed bound."""

    def __init__(self, message, bound=float("nan")):
        super().__init__(message)
        self.bound = bound


class GridError(MetastabError, ValueError):
    """Two step densities live on supports that cannot be merged."""


class ConfigError(MetastabError, ValueError):
    """An experiment configuration is malformed."""
