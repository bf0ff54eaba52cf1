"""Exception types raised across the package."""


class SolverForgeError(Exception):
    """Base class for all package errors."""


class DomainError(SolverForgeError, ValueError):
    """An argument lies outside the domain of the function."""


class SingularityError(SolverForgeError, ArithmeticError):
    """Evaluation hit a point where the formula is singular (e.g. sigma = 0)."""


class DivergenceError(SolverForgeError, ArithmeticError):
    """A sampler or search produced a non-finite value."""


class ScheduleValidationError(SolverForgeError, ValueError):
    """A solver schedule or schedule file violates an invariant."""


class ScheduleFormatError(ScheduleValidationError):
    """A schedule file cannot be parsed or has the wrong format version."""


class ScheduleMismatchError(SolverForgeError, ValueError):
    """A schedule is used with a field or noise schedule it was not built for."""
