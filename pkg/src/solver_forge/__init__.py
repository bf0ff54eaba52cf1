"""Differentiable search of few-step multistep solvers for diffusion / flow ODEs."""
from .errors import (
    DivergenceError,
    DomainError,
    ScheduleFormatError,
    ScheduleMismatchError,
    ScheduleValidationError,
    SingularityError,
    SolverForgeError,
)
from .fields import oracle_endpoint
from .registry import load_paper_schedule, load_schedule, save_schedule, validate_paper_tables
from .schedules import DIT_SCHEDULE, NoiseSchedule, SchedulerKind
from .search import SearchConfig, grad_schedule, run_search
from .solvers import SolverSchedule, build_schedule, sample

__version__ = "0.1.0"

__all__ = [
    "DivergenceError", "DomainError", "ScheduleFormatError", "ScheduleMismatchError",
    "ScheduleValidationError", "SingularityError", "SolverForgeError",
    "oracle_endpoint",
    "load_paper_schedule", "load_schedule", "save_schedule", "validate_paper_tables",
    "DIT_SCHEDULE", "NoiseSchedule", "SchedulerKind",
    "SearchConfig", "grad_schedule", "run_search",
    "SolverSchedule", "build_schedule", "sample",
]
