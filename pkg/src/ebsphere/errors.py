"""Exception hierarchy shared by all modules.

The CLI maps each family to a fixed exit code: validation/configuration 2,
solver 3, identity-check 4, I/O 5.
"""


class EBError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ValidationError(EBError, ValueError):
    exit_code = 2


class ConfigurationError(ValidationError):
    pass


class ModeError(ValidationError):
    """Operation called with parameters of the wrong mode (compact vs planar, parity of N)."""


class StabilityError(ValidationError):
    """Divisor does not satisfy the stability requirement of the operation."""


class AdmissibilityError(ValidationError):
    """Target volume outside the open admissible interval."""


class SolverError(EBError, RuntimeError):
    exit_code = 3

    def __init__(self, message, last_iterate=None, history=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.history = history or []


class LinearAlgebraError(SolverError):
    pass


class ShootingError(SolverError):
    pass


class IntegrationError(SolverError):
    pass


class IdentityCheckError(EBError, AssertionError):
    """A certified structural property (monotonicity, comparison, consistency) failed."""

    exit_code = 4


class BranchIdentityError(IdentityCheckError):
    pass


class ConsistencyError(IdentityCheckError):
    pass


class LimitCheckError(IdentityCheckError):
    pass


class SamplingError(IdentityCheckError):
    pass


class CheckpointError(EBError, IOError):
    exit_code = 5
