"""Exception hierarchy shared across the package."""


class SsmError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(SsmError, ValueError):
    """A caller-supplied argument violates a documented precondition."""


class ConfigError(SsmError):
    """Pipeline configuration file is malformed or inconsistent."""


class DecompositionError(SsmError):
    """A required matrix factorization failed (singular mass matrix, ...)."""


class IntegrationError(SsmError):
    """Time integration failed; carries the last valid time reached."""

    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time


class IllConditionedFitError(SsmError):
    """Least-squares design matrix is numerically rank deficient."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class FoldSuspectedError(SsmError):
    """Manifold graph residual indicates folding over the tangent space."""


class NonConvergenceError(SsmError):
    """Iterative fit did not converge; carries final cost and iterations."""

    def __init__(self, message, cost=None, iterations=None):
        super().__init__(message)
        self.cost = cost
        self.iterations = iterations


class DivergenceError(SsmError):
    """Reduced-model integration blew up (model used outside validity)."""


class ValidityRangeError(SsmError):
    """Requested amplitude range leaves the model validity region."""

    def __init__(self, message, rho_valid=None):
        super().__init__(message)
        self.rho_valid = rho_valid


class CalibrationRangeError(SsmError):
    """Measured amplitude cannot be matched on the validity interval."""


class SeedFailureError(SsmError):
    """Newton failed to converge from the continuation seed point."""


class ValidationThresholdError(SsmError):
    """A configured validation threshold (e.g. NMTE bound) was exceeded."""
