"""Differentiable solver search.

The few-step sampler is unrolled on a :class:`~solver_forge.tape.DualTape`
and aligned with an ``L``-step reference trajectory (Euler for rectified flow,
first-order exponential steps for VP).  The loss is

``w_mse * mean_i ||x_i - ref(t_i)||^2 + w_huber * Huber_delta(x_N - ref(1))``

where ``i`` runs over the interior states ``1 .. N-1``, ``ref(t)`` linearly
interpolates the reference in time, squared norms are summed over coordinates
and everything is averaged over the batch.  Parameters are updated with Lion.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import rng
from .errors import DivergenceError, DomainError
from .fields import Trajectory, VelocityField
from .schedules import NoiseSchedule, SchedulerKind
from .solvers import (
    SolverSchedule,
    build_schedule,
    coefficient_mask,
    euler_sample,
    exp_euler_sample,
    sample,
    uniform_grid,
)
from .tape import DualTape, Node

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "loss", "mse", "huber", "grad_norm")


@dataclass(frozen=True)
class SearchConfig:
    nfe: int
    ref_steps: int = 100
    batch: int = 512
    iterations: int = 300
    lr: float = 0.01
    seed: int = 0
    max_order: object = None
    w_mse: float = 1.0
    w_huber: float = 1.0
    huber_delta: float = 1.0
    betas: tuple = (0.9, 0.99)
    val_batch: int = 512

    def __post_init__(self):
        if self.nfe < 1:
            raise DomainError(f"nfe must be >= 1, got {self.nfe}")
        if self.ref_steps < self.nfe:
            raise DomainError(f"ref_steps ({self.ref_steps}) must be >= nfe ({self.nfe})")
        if not self.lr > 0:
            raise DomainError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.val_batch < 1:
            raise DomainError("batch sizes must be >= 1")
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        if self.huber_delta <= 0:
            raise DomainError("huber_delta must be positive")
        if isinstance(self.max_order, list):
            object.__setattr__(self, "max_order", tuple(self.max_order))

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- reference & loss


def reference_trajectory(field: VelocityField, x0, steps: int) -> Trajectory:
    """``steps``-step uniform reference run with the scheduler's first-order method."""
    if steps < 1:
        raise DomainError("reference needs at least one step")
    grid = uniform_grid(steps)
    if field.scheduler is SchedulerKind.VP_LINEAR:
        return exp_euler_sample(field, x0, grid)
    return euler_sample(field, x0, grid)


def _huber(e: np.ndarray, delta: float) -> np.ndarray:
    ae = np.abs(e)
    return np.where(ae <= delta, 0.5 * e * e, delta * (ae - 0.5 * delta))


def _batch_mean_sq(e: np.ndarray) -> float:
    e = np.atleast_2d(e)
    return float(np.mean(np.sum(e * e, axis=-1)))


def loss_terms(source: Trajectory, reference: Trajectory, cfg: SearchConfig) -> tuple[float, float]:
    """``(mse, huber)`` terms of the alignment loss, unweighted."""
    if source.times[0] < 0 or source.times[-1] > 1:
        raise DomainError("source times must lie in [0, 1]")
    interior = range(1, len(source.times) - 1)
    mse = 0.0
    if len(interior):
        mse = sum(_batch_mean_sq(source.states[i] - reference.at(source.times[i])) for i in interior)
        mse /= len(interior)
    e = np.atleast_2d(source.endpoint - reference.at(source.times[-1]))
    huber = float(np.mean(np.sum(_huber(e, cfg.huber_delta), axis=-1)))
    return mse, huber


def alignment_loss(source: Trajectory, reference: Trajectory, cfg: SearchConfig) -> float:
    mse, huber = loss_terms(source, reference, cfg)
    return cfg.w_mse * mse + cfg.w_huber * huber


# --------------------------------------------------------------------------- unrolled sampler


@dataclass
class GradResult:
    loss: float
    mse: float
    huber: float
    d_raw_r: np.ndarray
    d_raw_c: np.ndarray
    tape: DualTape = dc_field(repr=False, default=None)


def _softmax(tape: DualTape, r: Node) -> Node:
    e = tape.exp(r - float(np.max(r.value)))
    return e / tape.sum(e)


def _interp(tape: DualTape, reference: Trajectory, t) -> Node | np.ndarray:
    """Reference state at a (possibly recorded) time, linear in ``t`` within a segment."""
    tv = float(t.value) if isinstance(t, Node) else float(t)
    times = reference.times
    if tv >= times[-1]:
        return reference.states[-1]
    k = max(int(np.searchsorted(times, tv, side="right")) - 1, 0)
    slope = (reference.states[k + 1] - reference.states[k]) / (times[k + 1] - times[k])
    if not isinstance(t, Node):
        return reference.states[k] + (tv - times[k]) * slope
    return (t - times[k]) * slope + reference.states[k]


def _vp_alpha_sigma(tape: DualTape, noise: NoiseSchedule, s):
    """``(alpha, sigma)`` at sampling-axis time ``s`` (node or constant)."""
    tau = 1.0 - (1.0 - noise.t_min) * s
    integral = noise.beta_min * tau + 0.5 * (noise.beta_max - noise.beta_min) * tau * tau
    if not isinstance(integral, Node):
        integral = np.float64(integral)
        return np.exp(-0.5 * integral), np.sqrt(-np.expm1(-integral)), float(tau)
    alpha = tape.exp(integral * -0.5)
    sigma = tape.sqrt(-tape.expm1(-integral))
    return alpha, sigma, tau


def record_loss(field: VelocityField, x0: np.ndarray, reference: Trajectory, cfg: SearchConfig,
                raw_r, raw_c, noise: NoiseSchedule, max_order=None):
    """Record the unrolled sampler and loss; returns ``(tape, loss, mse, huber, r, c)`` nodes."""
    tape = DualTape()
    n = cfg.nfe
    r = tape.leaf(raw_r)
    c = tape.leaf(raw_c)
    mask = coefficient_mask(n, max_order)
    deltas = _softmax(tape, r)

    times = [0.0]
    for i in range(n - 1):
        times.append(times[-1] + deltas[i])
    times.append(1.0)

    rows = []
    for i in range(n):
        off = {j: c[i, j] for j in range(i) if mask[i, j]}
        rows.append((off, tape.complement(list(off.values()))))

    vp = noise.is_vp
    if vp:
        coeffs = [_vp_alpha_sigma(tape, noise, t) for t in times]

    x = np.asarray(x0, dtype=float)
    history, states = [], [x]
    for i in range(n):
        t_model = coeffs[i][2] if vp else times[i]
        history.append(tape.field(field, x, t_model))
        off, diag = rows[i]
        vbar = diag * history[i]
        for j, cij in off.items():
            vbar = vbar + cij * history[j]
        if vp:
            (a0, s0, _), (a1, s1, _) = coeffs[i], coeffs[i + 1]
            ratio = s1 / s0
            x = ratio * x + (a1 - ratio * a0) * vbar
        else:
            x = x + (times[i + 1] - times[i]) * vbar
        states.append(x)

    mse = 0.0
    if n > 1:
        for i in range(1, n):
            e = states[i] - _interp(tape, reference, times[i])
            mse = mse + tape.mean(tape.sum(tape.square(e), axis=-1))
        mse = mse * (1.0 / (n - 1))
    e_end = states[n] - _interp(tape, reference, 1.0)
    huber = tape.mean(tape.sum(tape.huber(e_end, cfg.huber_delta), axis=-1))
    loss = huber * cfg.w_huber + (mse * cfg.w_mse if n > 1 else 0.0)
    return tape, loss, mse, huber, r, c


def loss_and_grad(field: VelocityField, x0_batch, cfg: SearchConfig, schedule: SolverSchedule,
                  reference: Trajectory | None = None) -> GradResult:
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if reference is None:
        reference = reference_trajectory(field, x0, cfg.ref_steps)
    if schedule.kind is not field.scheduler:
        raise DomainError("schedule and field scheduler kinds differ")
    tape, loss, mse, huber, r, c = record_loss(
        field, x0, reference, cfg, schedule.raw_r, schedule.raw_c, schedule.noise, schedule.max_order
    )
    d_r, d_c = tape.gradients(loss, [r, c])
    value = float(loss.value)
    if not (np.isfinite(value) and np.all(np.isfinite(d_r)) and np.all(np.isfinite(d_c))):
        raise DivergenceError(f"non-finite loss or gradient (loss={value})")
    return GradResult(
        value,
        float(mse.value) if isinstance(mse, Node) else float(mse),
        float(huber.value),
        d_r,
        d_c,
        tape,
    )


def grad_schedule(field: VelocityField, x0_batch, cfg: SearchConfig, schedule: SolverSchedule):
    """Batch-mean loss and its gradients with respect to ``raw_r`` and ``raw_c``."""
    res = loss_and_grad(field, x0_batch, cfg, schedule)
    return res.loss, res.d_raw_r, res.d_raw_c


def evaluate_loss(field: VelocityField, x0_batch, cfg: SearchConfig, schedule: SolverSchedule,
                  reference: Trajectory | None = None) -> float:
    """Forward-only loss through the plain samplers (no tape)."""
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if reference is None:
        reference = reference_trajectory(field, x0, cfg.ref_steps)
    return alignment_loss(sample(field, x0, schedule), reference, cfg)


# --------------------------------------------------------------------------- optimizer


@dataclass
class LionState:
    momentum: list


def lion_step(params: list, grads: list, state: LionState | None, lr: float,
              betas: tuple = (0.9, 0.99)) -> tuple[list, LionState]:
    """One Lion update without weight decay; returns new params and state."""
    b1, b2 = betas
    if state is None:
        state = LionState([np.zeros_like(np.asarray(p, dtype=float)) for p in params])
    new_params, new_m = [], []
    for p, g, m in zip(params, grads, state.momentum):
        update = np.sign(b1 * m + (1.0 - b1) * g)
        new_params.append(np.asarray(p, dtype=float) - lr * update)
        new_m.append(b2 * m + (1.0 - b2) * g)
    return new_params, LionState(new_m)


# --------------------------------------------------------------------------- search loop


@dataclass
class SearchResult:
    schedule: SolverSchedule
    history: list
    val_losses: list
    initial_loss: float
    best_loss: float
    best_iteration: int
    diverged: bool = False

    @property
    def improvement(self) -> float:
        """Initial (Euler) validation loss over the best one."""
        if self.best_loss == 0.0:
            return 1.0 if self.initial_loss == 0.0 else float("inf")
        return self.initial_loss / self.best_loss

    def write_history(self, path) -> None:
        write_history_csv(self.history, path)


def write_history_csv(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def initial_schedule(cfg: SearchConfig, noise: NoiseSchedule) -> SolverSchedule:
    return build_schedule(np.ones(cfg.nfe), np.zeros((cfg.nfe, cfg.nfe)), noise, cfg.max_order)


def draw_noise(seed: int, shape, *names) -> np.ndarray:
    return rng.standard_normal(seed, shape, *names)


def run_search(field: VelocityField, cfg: SearchConfig) -> SearchResult:
    """Search timesteps and coefficients for ``field`` (Lion, fresh noise each iteration).

    The returned schedule is the iterate with the lowest loss on a fixed
    validation batch, starting from the Euler initialization.
    """
    noise = field.noise
    dim = field.dim
    schedule = initial_schedule(cfg, noise)
    val_x0 = draw_noise(cfg.seed, (cfg.val_batch, dim), "search", "validation")
    val_ref = reference_trajectory(field, val_x0, cfg.ref_steps)
    initial = evaluate_loss(field, val_x0, cfg, schedule, val_ref)
    best, best_it, best_sched = initial, 0, schedule
    val_losses = [initial]
    history = []
    state = None
    diverged = False
    mask = schedule.mask
    params = [schedule.raw_r.copy(), schedule.raw_c.copy()]
    for it in range(1, cfg.iterations + 1):
        x0 = draw_noise(cfg.seed, (cfg.batch, dim), "search", "batch", it)
        try:
            res = loss_and_grad(field, x0, cfg, schedule)
        except DivergenceError as exc:
            warnings.warn(f"search diverged at iteration {it}: {exc}", RuntimeWarning)
            diverged = True
            break
        grad_norm = float(np.sqrt(np.sum(res.d_raw_r ** 2) + np.sum(res.d_raw_c ** 2)))
        history.append(dict(iteration=it, loss=res.loss, mse=res.mse, huber=res.huber,
                            grad_norm=grad_norm))
        params, state = lion_step(params, [res.d_raw_r, np.where(mask, res.d_raw_c, 0.0)],
                                  state, cfg.lr, cfg.betas)
        try:
            schedule = schedule.with_params(raw_r=params[0], raw_c=params[1])
            val = evaluate_loss(field, val_x0, cfg, schedule, val_ref)
        except (DivergenceError, FloatingPointError) as exc:
            warnings.warn(f"search diverged at iteration {it}: {exc}", RuntimeWarning)
            diverged = True
            break
        if not np.isfinite(val):
            warnings.warn(f"non-finite validation loss at iteration {it}", RuntimeWarning)
            diverged = True
            break
        val_losses.append(val)
        if val < best:
            best, best_it, best_sched = val, it, schedule
        if it % 50 == 0:
            log.info("iter %d loss %.6g val %.6g best %.6g", it, res.loss, val, best)
    provenance = dict(source="searched", config_hash=cfg.config_hash(), seed=cfg.seed,
                      best_iteration=best_it)
    best_sched = best_sched.with_params(provenance=provenance)
    return SearchResult(best_sched, history, val_losses, initial, best, best_it, diverged)
