"""Solver schedules and samplers.

All samplers take a batch of start states ``x0`` (shape ``(B, d)`` or ``(d,)``)
drawn at the noise end and return a :class:`~solver_forge.fields.Trajectory`
on the sampling axis (0 = noise, 1 = data).  NFE accounting: one model call per
step for every multistep method, two per step for Heun.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import DivergenceError, DomainError, ScheduleMismatchError, ScheduleValidationError
from .fields import Trajectory, VelocityField
from .schedules import (
    NoiseSchedule,
    SchedulerKind,
    sampling_to_vp_time,
    vp_alpha_sigma,
    vp_time_from_lambda,
)



def _normalize_max_order(max_order, n: int) -> tuple | None:
    if max_order is None:
        return None
    if isinstance(max_order, (int, np.integer)):
        caps = (int(max_order),) * n
    else:
        caps = tuple(None if m is None else int(m) for m in max_order)
        if len(caps) != n:
            raise ScheduleValidationError(f"max_order has {len(caps)} rows, expected {n}")
    for i, m in enumerate(caps):
        if m is not None and m < 1:
            raise ScheduleValidationError(f"max_order row {i} must be >= 1, got {m}")
    if all(m is None for m in caps):
        return None
    return caps


def coefficient_mask(n: int, max_order=None) -> np.ndarray:
    """Boolean mask of the searchable strictly-lower entries of ``M``."""
    caps = _normalize_max_order(max_order, n)
    i, j = np.indices((n, n))
    mask = j < i
    if caps is not None:
        lim = np.array([n if m is None else m for m in caps])[:, None]
        mask &= (i - j) <= lim
    return mask


def order_cap_last_rows(n: int, rows: int = 2, order: int = 1) -> tuple | None:
    """Per-row cap limiting the last ``rows`` rows to ``order`` lookback."""
    rows = min(rows, n)
    return tuple([None] * (n - rows) + [order] * rows)


def complement(values) -> float:
    """Correctly rounded ``1 - sum(values)``."""
    return -math.fsum([*map(float, values), -1.0])


def coefficient_matrix(raw_c: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``M`` from the strictly-lower coefficients and the diagonal rule."""
    n = raw_c.shape[0]
    m = np.where(mask, raw_c, 0.0)
    for i in range(n):
        m[i, i] = complement(m[i, :i])
    return m


def _as_lower_matrix(raw_c, n: int) -> np.ndarray:
    """Accept a full ``n x n`` array or ragged rows (row ``i`` has ``i`` entries)."""
    if raw_c is None:
        return np.zeros((n, n))
    if isinstance(raw_c, np.ndarray) and raw_c.ndim == 2:
        arr = raw_c.astype(float)
    else:
        rows = list(raw_c)
        if len(rows) != n:
            raise ScheduleValidationError(f"coefficients have {len(rows)} rows, expected {n}")
        lens = [len(r) for r in rows]
        if all(length == n for length in lens) and n > 1:
            arr = np.asarray(rows, dtype=float)
        else:
            arr = np.zeros((n, n))
            for i, row in enumerate(rows):
                if len(row) != i:
                    raise ScheduleValidationError(
                        f"coefficient row {i} has {len(row)} entries, expected {i}"
                    )
                arr[i, :i] = row
    if arr.shape != (n, n):
        raise ScheduleValidationError(f"coefficient matrix has shape {arr.shape}, expected {(n, n)}")
    if not np.all(np.isfinite(arr)):
        raise ScheduleValidationError("coefficients must be finite")
    if np.any(np.triu(arr) != 0.0):
        i, j = np.argwhere(np.triu(arr) != 0.0)[0]
        raise ScheduleValidationError(
            f"coefficients must be strictly lower triangular (entry [{i}][{j}] is nonzero)"
        )
    return arr


def softmax(r: np.ndarray) -> np.ndarray:
    e = np.exp(r - np.max(r))
    return e / np.sum(e)


def times_from_deltas(deltas: np.ndarray) -> np.ndarray:
    """``t_0 = 0``, ``t_{i+1} = t_i + delta_i``, with ``t_N`` pinned to 1."""
    t = np.empty(len(deltas) + 1)
    t[0] = 0.0
    acc = 0.0
    for i, d in enumerate(deltas):
        acc = acc + float(d)
        t[i + 1] = acc
    t[-1] = 1.0
    if np.any(np.diff(t) <= 0):
        raise ScheduleValidationError("time grid is not strictly increasing")
    return t


@dataclass(frozen=True, eq=False)
class SolverSchedule:
    """Searchable solver: time deltas and a lower-triangular coefficient matrix.

    ``raw_r`` are the unbounded timestep parameters (``deltas = softmax(raw_r)``)
    and ``raw_c`` the strictly-lower coefficients.  ``M`` takes ``raw_c`` on the
    entries allowed by ``max_order`` and a diagonal that makes every row sum to 1.
    """

    raw_r: np.ndarray
    raw_c: np.ndarray
    noise: NoiseSchedule
    max_order: tuple | None
    deltas: np.ndarray
    M: np.ndarray
    times: np.ndarray
    provenance: dict = dc_field(default_factory=dict)

    @property
    def nfe(self) -> int:
        return len(self.deltas)

    @property
    def kind(self) -> SchedulerKind:
        return self.noise.kind

    @property
    def mask(self) -> np.ndarray:
        return coefficient_mask(self.nfe, self.max_order)

    @property
    def steps(self) -> np.ndarray:
        """Step sizes ``t_{i+1} - t_i`` actually used by the samplers."""
        return np.diff(self.times)

    def coefficient_rows(self) -> list[list[float]]:
        return [[float(v) for v in self.M[i, :i]] for i in range(self.nfe)]

    def error_bound_factor(self) -> float:
        """``sum_i sum_j |M_ij| * dt_i``; times ``eta`` bounds the model-error effect."""
        return float(np.sum(np.abs(self.M) * self.steps[:, None]))

    def with_params(self, raw_r=None, raw_c=None, provenance=None) -> "SolverSchedule":
        return build_schedule(
            self.raw_r if raw_r is None else raw_r,
            self.raw_c if raw_c is None else raw_c,
            self.noise,
            self.max_order,
            provenance=self.provenance if provenance is None else provenance,
        )

    @classmethod
    def from_deltas(cls, deltas, coeffs, noise, max_order=None, provenance=None):
        """Schedule with the given (already normalized) deltas kept verbatim."""
        deltas = np.asarray(deltas, dtype=float)
        if deltas.ndim != 1 or len(deltas) < 1:
            raise ScheduleValidationError("deltas must be a non-empty vector")
        if not np.all(np.isfinite(deltas)) or np.any(deltas <= 0):
            raise ScheduleValidationError("deltas must be finite and positive")
        return _assemble(np.log(deltas), coeffs, noise, max_order, deltas, provenance)

    @classmethod
    def euler(cls, nfe: int, noise=SchedulerKind.RECTIFIED_FLOW) -> "SolverSchedule":
        return build_schedule(np.ones(nfe), None, noise)


def _as_noise(noise) -> NoiseSchedule:
    if isinstance(noise, NoiseSchedule):
        return noise
    kind = SchedulerKind.parse(noise)
    return NoiseSchedule.vp_linear() if kind is SchedulerKind.VP_LINEAR else NoiseSchedule()


def _assemble(raw_r, raw_c, noise, max_order, deltas, provenance):
    raw_r = np.array(raw_r, dtype=float).reshape(-1)
    n = len(raw_r)
    if n < 1:
        raise ScheduleValidationError("a schedule needs at least one step")
    if not np.all(np.isfinite(raw_r)):
        raise ScheduleValidationError("raw_r must be finite")
    c = _as_lower_matrix(raw_c, n)
    caps = _normalize_max_order(max_order, n)
    mask = coefficient_mask(n, caps)
    if deltas is None:
        deltas = softmax(raw_r)
    m = coefficient_matrix(c, mask)
    t = times_from_deltas(deltas)
    for a in (raw_r, c, deltas, m, t):
        a.setflags(write=False)
    return SolverSchedule(raw_r, c, _as_noise(noise), caps, deltas, m, t, dict(provenance or {}))


def build_schedule(raw_r, raw_c=None, scheduler_kind=SchedulerKind.RECTIFIED_FLOW,
                   max_order=None, provenance=None) -> SolverSchedule:
    """Build a schedule from unbounded parameters (``deltas = softmax(raw_r)``)."""
    return _assemble(raw_r, raw_c, scheduler_kind, max_order, None, provenance)


# --------------------------------------------------------------------------- helpers


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2:
        raise DomainError("grid needs at least two time points")
    if np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be strictly increasing")
    return grid


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite state after step {step}")


def _check_kind(field: VelocityField, kind: SchedulerKind) -> None:
    if field.scheduler is not kind:
        raise ScheduleMismatchError(
            f"field outputs {field.scheduler.value} quantities, sampler expects {kind.value}"
        )


def _vp_noise(field: VelocityField, noise: NoiseSchedule | None) -> NoiseSchedule:
    noise = noise or field.noise
    if not noise.is_vp:
        raise ScheduleMismatchError("VP sampler needs a VP noise schedule")
    fn = field.noise
    if fn.is_vp and (fn.beta_min, fn.beta_max) != (noise.beta_min, noise.beta_max):
        raise ScheduleMismatchError(
            f"field uses beta range ({fn.beta_min}, {fn.beta_max}) but sampler got "
            f"({noise.beta_min}, {noise.beta_max})"
        )
    return noise


def _combine(row: np.ndarray, history: list) -> np.ndarray:
    acc = row[0] * history[0]
    for w, v in zip(row[1:], history[1:]):
        acc = acc + w * v
    return acc


# --------------------------------------------------------------------------- RF samplers


def euler_sample(field: VelocityField, x0, grid) -> Trajectory:
    grid = _check_grid(grid)
    x = np.array(x0, dtype=float)
    states, evals = [x], []
    for i in range(len(grid) - 1):
        v = field(x, grid[i])
        evals.append(v)
        x = x + (grid[i + 1] - grid[i]) * v
        _check_finite(x, i)
        states.append(x)
    return Trajectory(grid, np.stack(states), evals, nfe=len(evals))


def multistep_rf_sample(field: VelocityField, x0, schedule: SolverSchedule) -> Trajectory:
    """Searched multistep sampler: ``x_{i+1} = x_i + dt_i * sum_j M_ij v_j``."""
    if schedule.kind is not SchedulerKind.RECTIFIED_FLOW:
        raise ScheduleMismatchError("schedule is not a rectified-flow schedule")
    _check_kind(field, SchedulerKind.RECTIFIED_FLOW)
    t = schedule.times
    x = np.array(x0, dtype=float)
    states, history = [x], []
    for i in range(schedule.nfe):
        history.append(field(x, t[i]))
        vbar = _combine(schedule.M[i, : i + 1], history)
        x = x + (t[i + 1] - t[i]) * vbar
        _check_finite(x, i)
        states.append(x)
    return Trajectory(t, np.stack(states), history, nfe=len(history))


def adams_weights(nodes, t0: float, t1: float) -> np.ndarray:
    """Averaged integrals over ``[t0, t1]`` of the Lagrange basis on ``nodes``.

    ``x1 = x0 + (t1 - t0) * sum_j w_j v(nodes_j)`` is the Adams-Bashforth step.
    """
    h = t1 - t0
    u = (np.asarray(nodes, dtype=float) - t0) / h
    w = np.empty(len(u))
    for j in range(len(u)):
        others = np.delete(u, j)
        basis = P.polyfromroots(others) / np.prod(u[j] - others) if len(others) else np.array([1.0])
        integral = P.polyint(basis)
        w[j] = P.polyval(1.0, integral) - P.polyval(0.0, integral)
    return w


def _rk4_step(field, x, t, h, k1):
    k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = field(x + h * k3, t + h)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def adams_bashforth_sample(field: VelocityField, x0, grid, order: int = 2,
                           startup: str = "lower") -> Trajectory:
    """Adams-Bashforth of ``order`` k on an arbitrary increasing grid.

    ``startup="lower"`` runs the first ``k - 1`` steps with the highest order
    the history allows (AB1, AB2, ...), one model call per step.  This caps the
    global order at 2 for ``k >= 3``.  ``startup="rk4"`` takes those steps with
    classical RK4 instead (three extra calls per start-up step) and keeps the
    full order ``k``.
    """
    if order < 1:
        raise DomainError(f"order must be >= 1, got {order}")
    if startup not in ("lower", "rk4"):
        raise DomainError(f"unknown startup {startup!r}")
    grid = _check_grid(grid)
    x = np.array(x0, dtype=float)
    states, history = [x], []
    nfe = 0
    for i in range(len(grid) - 1):
        v = field(x, grid[i])
        nfe += 1
        history.append(v)
        h = grid[i + 1] - grid[i]
        if startup == "rk4" and i < order - 1:
            x = _rk4_step(field, x, grid[i], h, v)
            nfe += 3
        else:
            k = min(order, i + 1)
            w = adams_weights(grid[i - k + 1 : i + 1], grid[i], grid[i + 1])
            x = x + h * _combine(w, history[i - k + 1 :])
        _check_finite(x, i)
        states.append(x)
    return Trajectory(grid, np.stack(states), history, nfe=nfe)


def heun_sample(field: VelocityField, x0, grid) -> Trajectory:
    """Explicit trapezoid (Heun) predictor-corrector, two calls per step."""
    grid = _check_grid(grid)
    x = np.array(x0, dtype=float)
    states, evals = [x], []
    for i in range(len(grid) - 1):
        h = grid[i + 1] - grid[i]
        v = field(x, grid[i])
        v_pred = field(x + h * v, grid[i + 1])
        evals.extend([v, v_pred])
        x = x + 0.5 * h * (v + v_pred)
        _check_finite(x, i)
        states.append(x)
    return Trajectory(grid, np.stack(states), evals, nfe=len(evals))


# --------------------------------------------------------------------------- VP samplers


def _vp_coeffs(noise: NoiseSchedule, grid: np.ndarray):
    tau = sampling_to_vp_time(noise, grid)
    alpha, sigma = vp_alpha_sigma(noise, tau)
    if np.any(sigma == 0.0):
        raise DomainError("VP grid reaches sigma = 0; keep t_min > 0")
    return tau, alpha, sigma


def multistep_vp_sample(field: VelocityField, x0, schedule: SolverSchedule,
                        noise_sched: NoiseSchedule | None = None) -> Trajectory:
    """Searched exponential-integrator sampler in the x-bar parametrization.

    ``x_{i+1} = (sigma_{i+1}/sigma_i) x_i + sigma_{i+1} (omega_{i+1} - omega_i) sum_j M_ij xbar_j``,
    evaluated as ``alpha_{i+1} - (sigma_{i+1}/sigma_i) alpha_i`` for the second factor.
    """
    if schedule.kind is not SchedulerKind.VP_LINEAR:
        raise ScheduleMismatchError("schedule is not a VP schedule")
    _check_kind(field, SchedulerKind.VP_LINEAR)
    noise = _vp_noise(field, noise_sched or schedule.noise)
    if (schedule.noise.beta_min, schedule.noise.beta_max) != (noise.beta_min, noise.beta_max):
        raise ScheduleMismatchError("schedule was built for a different beta range")
    grid = schedule.times
    tau, alpha, sigma = _vp_coeffs(noise, grid)
    x = np.array(x0, dtype=float)
    states, history = [x], []
    for i in range(schedule.nfe):
        history.append(field(x, tau[i]))
        xbar = _combine(schedule.M[i, : i + 1], history)
        ratio = sigma[i + 1] / sigma[i]
        x = ratio * x + (alpha[i + 1] - ratio * alpha[i]) * xbar
        _check_finite(x, i)
        states.append(x)
    return Trajectory(grid, np.stack(states), history, nfe=len(history))


def exp_euler_sample(field: VelocityField, x0, grid, noise_sched: NoiseSchedule | None = None):
    """First-order exponential integrator (DDIM-type) on a sampling-axis grid."""
    _check_kind(field, SchedulerKind.VP_LINEAR)
    noise = _vp_noise(field, noise_sched)
    grid = _check_grid(grid)
    tau, alpha, sigma = _vp_coeffs(noise, grid)
    x = np.array(x0, dtype=float)
    states, evals = [x], []
    for i in range(len(grid) - 1):
        xbar = field(x, tau[i])
        evals.append(xbar)
        ratio = sigma[i + 1] / sigma[i]
        x = ratio * x + (alpha[i + 1] - ratio * alpha[i]) * xbar
        _check_finite(x, i)
        states.append(x)
    return Trajectory(grid, np.stack(states), evals, nfe=len(evals))


def dpm_solver_pp_2m_sample(field: VelocityField, x0, grid, noise_sched: NoiseSchedule | None = None,
                            lower_order_final: bool = True) -> Trajectory:
    """DPM-Solver++(2M) in half-log-SNR steps.

    The first step is first order.  With ``lower_order_final`` the last step is
    first order too when the grid has fewer than 15 intervals, matching the
    usual few-step configuration.
    """
    _check_kind(field, SchedulerKind.VP_LINEAR)
    noise = _vp_noise(field, noise_sched)
    grid = _check_grid(grid)
    tau, alpha, sigma = _vp_coeffs(noise, grid)
    lam = np.log(alpha) - np.log(sigma)
    n = len(grid) - 1
    x = np.array(x0, dtype=float)
    states, evals = [x], []
    for i in range(n):
        xbar = field(x, tau[i])
        evals.append(xbar)
        ratio = sigma[i + 1] / sigma[i]
        gain = alpha[i + 1] - ratio * alpha[i]  # = -alpha_{i+1} (e^{-h} - 1)
        first_order = i == 0 or (lower_order_final and n < 15 and i == n - 1)
        if first_order:
            d = xbar
        else:
            r = (lam[i] - lam[i - 1]) / (lam[i + 1] - lam[i])
            d = (1.0 + 0.5 / r) * xbar - (0.5 / r) * evals[i - 1]
        x = ratio * x + gain * d
        _check_finite(x, i)
        states.append(x)
    return Trajectory(grid, np.stack(states), evals, nfe=len(evals))


class _OmegaField(VelocityField):
    """``dy/domega = xbar(sigma y)`` for ``y = x / sigma``, ``omega = alpha / sigma``."""

    def __init__(self, field: VelocityField, noise: NoiseSchedule):
        self.field = field
        self.noise_sched = noise
        self.dim = field.dim

    def _eval(self, y, w):
        tau = vp_time_from_lambda(self.noise_sched, math.log(w))
        _, sigma = vp_alpha_sigma(self.noise_sched, min(max(tau, 0.0), 1.0))
        return self.field._eval(sigma * y, tau)


def omega_space_sample(sampler, field: VelocityField, x0, grid,
                       noise_sched: NoiseSchedule | None = None, **kwargs) -> Trajectory:
    """Run an RF-style ``sampler`` on the VP probability-flow ODE written in ``omega``.

    ``x / sigma`` integrates ``xbar`` exactly in ``omega = alpha / sigma``, so Euler
    in these coordinates is the first-order exponential step; Heun and
    Adams-Bashforth give the corresponding higher-order data-prediction schemes.
    """
    _check_kind(field, SchedulerKind.VP_LINEAR)
    noise = _vp_noise(field, noise_sched)
    grid = _check_grid(grid)
    _, alpha, sigma = _vp_coeffs(noise, grid)
    omega = alpha / sigma
    y0 = np.asarray(x0, dtype=float) / sigma[0]
    traj = sampler(_OmegaField(field, noise), y0, omega, **kwargs)
    shape = (-1,) + (1,) * (traj.states.ndim - 1)
    states = traj.states * sigma.reshape(shape)
    return Trajectory(grid, states, traj.evals, nfe=traj.nfe)


_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(24)


def exp_adams_weights(lam_nodes, lam0: float, lam1: float) -> np.ndarray:
    """``int_{lam0}^{lam1} exp(lam - lam1) L_j(lam) dlam`` for the Lagrange basis on ``lam_nodes``."""
    nodes = np.asarray(lam_nodes, dtype=float)
    half = 0.5 * (lam1 - lam0)
    lam = lam0 + half * (_GAUSS_NODES + 1.0)
    kernel = half * _GAUSS_WEIGHTS * np.exp(lam - lam1)
    w = np.empty(len(nodes))
    for j in range(len(nodes)):
        others = np.delete(nodes, j)
        basis = np.prod((lam[:, None] - others) / (nodes[j] - others), axis=1)
        w[j] = np.sum(kernel * basis)
    return w


def exp_adams_sample(field: VelocityField, x0, grid, order: int = 2,
                     noise_sched: NoiseSchedule | None = None,
                     lower_order_final: bool = True) -> Trajectory:
    """Exponential Adams-Bashforth in the x-bar parametrization.

    ``x_{i+1} = (sigma_{i+1}/sigma_i) x_i + alpha_{i+1} sum_j w_j xbar_j`` where
    the ``w_j`` integrate ``exp(lam - lam_{i+1})`` against the Lagrange
    polynomial through the last ``order`` half-log-SNR nodes.  Order 1 is the
    first-order exponential step; start-up steps use the available history.
    ``lower_order_final`` makes the last step first order on grids with fewer
    than 15 intervals, as for :func:`dpm_solver_pp_2m_sample`.
    """
    if order < 1:
        raise DomainError(f"order must be >= 1, got {order}")
    _check_kind(field, SchedulerKind.VP_LINEAR)
    noise = _vp_noise(field, noise_sched)
    grid = _check_grid(grid)
    tau, alpha, sigma = _vp_coeffs(noise, grid)
    lam = np.log(alpha) - np.log(sigma)
    x = np.array(x0, dtype=float)
    states, history = [x], []
    n = len(grid) - 1
    for i in range(n):
        history.append(field(x, tau[i]))
        ratio = sigma[i + 1] / sigma[i]
        if i == 0 or order == 1 or (lower_order_final and n < 15 and i == n - 1):
            x = ratio * x + (alpha[i + 1] - ratio * alpha[i]) * history[i]
        else:
            k = min(order, i + 1)
            w = exp_adams_weights(lam[i - k + 1 : i + 1], lam[i], lam[i + 1])
            x = ratio * x + alpha[i + 1] * _combine(w, history[i - k + 1 :])
        _check_finite(x, i)
        states.append(x)
    return Trajectory(grid, np.stack(states), history, nfe=len(history))


def uniform_grid(nfe: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, nfe + 1)


def sample(field: VelocityField, x0, schedule: SolverSchedule) -> Trajectory:
    """Run the searched sampler matching the schedule's scheduler kind."""
    if schedule.kind is SchedulerKind.VP_LINEAR:
        return multistep_vp_sample(field, x0, schedule)
    return multistep_rf_sample(field, x0, schedule)
