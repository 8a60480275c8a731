"""Exception types shared across the package."""


class JumpestError(Exception):
    """Base class for all library errors."""


class ConfigError(JumpestError):
    """Invalid configuration (unknown key, bad range, unresolvable name)."""


class DataFormatError(JumpestError):
    """Malformed input data (CSV schema, nonuniform grid, empty file)."""


class DomainExitError(JumpestError):
    """A simulated state left the open state space; never clamped."""


class CoefficientError(JumpestError):
    """A user coefficient returned NaN or an otherwise unusable value."""


class QuadratureError(JumpestError):
    """Levy-integral quadrature failed to converge; carries the partial value."""

    def __init__(self, message, partial=None, error_estimate=None):
        super().__init__(message)
        self.partial = partial
        self.error_estimate = error_estimate


class InsufficientSmoothnessError(JumpestError):
    """A derivative required by an operation was not supplied."""


class SingularJacobianError(JumpestError):
    """Newton hit an (numerically) singular Jacobian; carries the iterate."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class NoRootError(JumpestError):
    """No start of the multi-start solver converged to a root."""
