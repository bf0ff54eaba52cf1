"""Noise-scheduler math for rectified flow and continuous VP (linear beta).

Time conventions
----------------
Rectified flow: ``t = 0`` is pure noise and ``t = 1`` is data, with
``x_t = t * x_data + (1 - t) * noise``.

VP: the internal time ``tau`` runs the other way, ``tau = 0`` is clean data
(``alpha(0) = 1``, ``sigma(0) = 0``) and ``tau = 1`` is the noisy end.  Samplers
work on a normalized *sampling axis* ``s`` in ``[0, 1]`` (``s = 0`` noise,
``s = 1`` data) which is mapped affinely onto ``tau`` in ``[t_min, 1]`` by
:func:`sampling_to_vp_time`.  ``t_min`` keeps the last VP time away from the
``sigma = 0`` singularity.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SingularityError


class SchedulerKind(str, enum.Enum):
    RECTIFIED_FLOW = "rectified_flow"
    VP_LINEAR = "vp_linear"

    @classmethod
    def parse(cls, value: "str | SchedulerKind") -> "SchedulerKind":
        if isinstance(value, cls):
            return value
        aliases = {"rf": cls.RECTIFIED_FLOW, "vp": cls.VP_LINEAR}
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise DomainError(f"unknown scheduler kind {value!r}") from None


@dataclass(frozen=True)
class NoiseSchedule:
    """A rectified-flow or linear-beta VP noise schedule.

    ``beta_min``/``beta_max`` are per unit VP time and ignored for rectified
    flow.  ``t_min`` is the VP time reached at the data end of the sampling axis.
    """

    kind: SchedulerKind = SchedulerKind.RECTIFIED_FLOW
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "kind", SchedulerKind.parse(self.kind))
        if self.kind is SchedulerKind.VP_LINEAR:
            if not self.beta_min > 0:
                raise DomainError(f"beta_min must be > 0, got {self.beta_min}")
            if not self.beta_max > self.beta_min:
                raise DomainError(
                    f"beta_max must exceed beta_min, got {self.beta_max} <= {self.beta_min}"
                )
            if not 0 < self.t_min < 1:
                raise DomainError(f"t_min must lie in (0, 1), got {self.t_min}")

    @classmethod
    def rectified_flow(cls) -> "NoiseSchedule":
        return cls(SchedulerKind.RECTIFIED_FLOW)

    @classmethod
    def vp_linear(cls, beta_min: float = 0.1, beta_max: float = 20.0, t_min: float = 1e-4):
        return cls(SchedulerKind.VP_LINEAR, beta_min, beta_max, t_min)

    @property
    def is_vp(self) -> bool:
        return self.kind is SchedulerKind.VP_LINEAR


# DiT / PixArt training schedule.
DIT_SCHEDULE = NoiseSchedule.vp_linear(0.1, 20.0)


def _require_vp(sched: NoiseSchedule) -> None:
    if not sched.is_vp:
        raise DomainError("operation requires a VP schedule")


def _check_unit_interval(t) -> None:
    ta = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(ta)) or np.any(ta < 0.0) or np.any(ta > 1.0):
        raise DomainError(f"time must lie in [0, 1], got {t}")


def vp_beta(sched: NoiseSchedule, t):
    """Instantaneous ``beta(t)`` of the linear schedule."""
    return sched.beta_min + (sched.beta_max - sched.beta_min) * t


def vp_beta_integral(sched: NoiseSchedule, t):
    """Closed form of the integral of beta from 0 to ``t``."""
    return sched.beta_min * t + 0.5 * (sched.beta_max - sched.beta_min) * t * t


def vp_alpha_sigma(sched: NoiseSchedule, t):
    """Return ``(alpha, sigma)`` at VP time ``t`` (``t = 0`` is clean data)."""
    _require_vp(sched)
    _check_unit_interval(t)
    integral = vp_beta_integral(sched, np.asarray(t, dtype=float))
    alpha = np.exp(-0.5 * integral)
    sigma = np.sqrt(-np.expm1(-integral))
    if np.ndim(alpha) == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def vp_omega(sched: NoiseSchedule, t):
    """``omega = alpha / sigma``; singular at ``t = 0``."""
    alpha, sigma = vp_alpha_sigma(sched, t)
    if np.any(np.asarray(sigma) == 0.0):
        raise SingularityError("omega is singular where sigma = 0 (t = 0)")
    return alpha / sigma


def vp_lambda(sched: NoiseSchedule, t):
    """Half log-SNR ``log(alpha / sigma)``."""
    return np.log(vp_omega(sched, t))


def vp_time_from_lambda(sched: NoiseSchedule, lam):
    """Inverse of :func:`vp_lambda` (closed form for the linear schedule)."""
    _require_vp(sched)
    integral = np.log1p(np.exp(-2.0 * np.asarray(lam, dtype=float)))
    b0, db = sched.beta_min, sched.beta_max - sched.beta_min
    # root of 0.5 db t^2 + b0 t - I = 0, written without cancellation
    tau = 2.0 * integral / (b0 + np.sqrt(b0 * b0 + 2.0 * db * integral))
    return float(tau) if np.ndim(tau) == 0 else tau


def sampling_to_vp_time(sched: NoiseSchedule, s):
    """Map the sampling axis (0 = noise, 1 = data) onto VP time ``[t_min, 1]``."""
    _require_vp(sched)
    return 1.0 - (1.0 - sched.t_min) * np.asarray(s, dtype=float)


def vp_time_to_sampling(sched: NoiseSchedule, tau):
    _require_vp(sched)
    return (1.0 - np.asarray(tau, dtype=float)) / (1.0 - sched.t_min)


@dataclass(frozen=True)
class RespacePolynomial:
    """Degree-4 respacing polynomial through the origin.

    ``coefficients`` are ``(c4, c3, c2, c1)`` for ``c4 t^4 + c3 t^3 + c2 t^2 + c1 t``.
    """

    coefficients: tuple[float, float, float, float]
    name: str = ""

    def __call__(self, t):
        return respace(self, t)


REFLOW_RESPACE = RespacePolynomial((-1.96, 3.51, -0.97, 0.43), "reflow")
DDPM_RESPACE = RespacePolynomial((-2.73, 6.30, -4.744, 2.17), "ddpm")
RESPACE_FAMILIES = {"reflow": REFLOW_RESPACE, "ddpm": DDPM_RESPACE}


def respace(poly: RespacePolynomial, t):
    """Evaluate the respacing polynomial (Horner form, no constant term)."""
    c4, c3, c2, c1 = poly.coefficients
    t = np.asarray(t, dtype=float)
    value = (((c4 * t + c3) * t + c2) * t + c1) * t
    return float(value) if value.ndim == 0 else value


def respace_grid(poly: RespacePolynomial, nfe: int) -> np.ndarray:
    """``nfe + 1`` timesteps from the polynomial at uniform arguments, clamped to [0, 1]."""
    if nfe < 1:
        raise DomainError(f"nfe must be >= 1, got {nfe}")
    u = np.linspace(0.0, 1.0, nfe + 1)
    return np.clip(respace(poly, u), 0.0, 1.0)
