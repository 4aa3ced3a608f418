"""Exception hierarchy shared by all modules."""


class SdFilterError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(SdFilterError, ValueError):
    """Inputs with inconsistent shapes, non-finite entries or invalid covariances."""


class InvalidParameterError(SdFilterError, ValueError):
    """Static parameters outside the admissible domain (e.g. nu <= 2)."""


class SingularInnovationError(SdFilterError, ArithmeticError):
    """The innovation covariance F_t is numerically singular."""

    def __init__(self, step: int, cond: float):
        self.step = step
        self.cond = cond
        super().__init__(
            f"innovation covariance is numerically singular at step {step} "
            f"(condition number {cond:.3g})"
        )


class NumericalFailureError(SdFilterError, ArithmeticError):
    """A recursion produced a non-finite value."""

    def __init__(self, message: str, step: int | None = None, state=None):
        self.step = step
        self.state = state
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class IdentificationError(SdFilterError, ValueError):
    """The requested quantity is not identified under the chosen normalization."""


class EstimationFailure(SdFilterError, RuntimeError):
    """No optimizer start converged."""

    def __init__(self, message: str, diagnostics=None):
        self.diagnostics = diagnostics or []
        super().__init__(message)


class PriorDomainError(SdFilterError, RuntimeError):
    """Too many draws from the parameter prior fell outside the domain."""


class ParticleDegeneracyError(SdFilterError, ArithmeticError):
    """All particle weights underflowed."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"all particle weights vanished at step {step}")


class InternalInvariantError(SdFilterError, AssertionError):
    """An internal invariant was violated."""


class ConfigError(SdFilterError, ValueError):
    """A configuration file failed validation."""


class ExperimentAborted(SdFilterError, RuntimeError):
    """Too many Monte Carlo replications failed."""

    def __init__(self, message: str, failures=None):
        self.failures = failures or []
        super().__init__(message)
