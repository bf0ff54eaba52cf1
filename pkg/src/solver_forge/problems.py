"""Named test problems, oracle trajectories, the solver benchmark and the
perturbation bound check.

Problems (``--problem`` on the command line)::

    constant   v = (0.5, -0.25)                           rf, vp (x-bar = const)
    linear     v = A x with a fixed 2x2 rotation-shear    rf
    sine       v = sin(2 pi t) x                          rf
    gaussian   data N((0.8, -0.6), 0.5^2 I)               rf, vp
    gmm2d      3-component isotropic 2-D mixture          rf, vp

VP problems use the linear beta range (0.1, 20) with ``t_min = 1e-4``.
A problem can also be read from a TOML file (see :func:`load_problem`).
"""
from __future__ import annotations

import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import rng
from .errors import DivergenceError, DomainError, ScheduleMismatchError
from .fields import (
    ConstantField,
    GaussianField,
    GaussianMixtureField,
    LinearField,
    MixtureComponents,
    PerturbedField,
    SineLinearField,
    VelocityField,
    _as_batch,
    kahan_add,
)
from .schedules import DIT_SCHEDULE, NoiseSchedule, SchedulerKind, sampling_to_vp_time, vp_alpha_sigma
from .solvers import (
    SolverSchedule,
    adams_bashforth_sample,
    dpm_solver_pp_2m_sample,
    euler_sample,
    exp_adams_sample,
    exp_euler_sample,
    heun_sample,
    omega_space_sample,
    sample,
    uniform_grid,
)

GMM2D = MixtureComponents(
    weights=[0.5, 0.3, 0.2],
    means=[[1.5, 0.5], [-1.0, 1.2], [-0.5, -1.5]],
    scales=[0.35, 0.25, 0.45],
)
GAUSSIAN_MEAN = (0.8, -0.6)
GAUSSIAN_SCALE = 0.5
CONSTANT_VALUE = (0.5, -0.25)
LINEAR_MATRIX = ((0.3, -1.0), (0.8, -0.2))

PROBLEMS = ("constant", "linear", "sine", "gaussian", "gmm2d")
VP_PROBLEMS = ("constant", "gaussian", "gmm2d")


def make_field(name: str, scheduler="rf", noise: NoiseSchedule | None = None) -> VelocityField:
    """Build a named problem for ``scheduler`` (``rf`` or ``vp``)."""
    kind = SchedulerKind.parse(scheduler)
    if name.endswith(".toml"):
        return load_problem(name)
    if name not in PROBLEMS:
        raise DomainError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}")
    if kind is SchedulerKind.VP_LINEAR:
        if name not in VP_PROBLEMS:
            raise DomainError(f"problem {name!r} has no VP form")
        noise = noise or DIT_SCHEDULE
        if name == "constant":
            return ConstantField(CONSTANT_VALUE, kind, noise)
        if name == "gaussian":
            return GaussianField(GAUSSIAN_MEAN, GAUSSIAN_SCALE, noise)
        return GaussianMixtureField(GMM2D, noise)
    if name == "constant":
        return ConstantField(CONSTANT_VALUE)
    if name == "linear":
        return LinearField(LINEAR_MATRIX)
    if name == "sine":
        return SineLinearField(np.eye(2))
    if name == "gaussian":
        return GaussianField(GAUSSIAN_MEAN, GAUSSIAN_SCALE)
    return GaussianMixtureField(GMM2D)


def load_problem(path) -> VelocityField:
    """Read a mixture or constant problem from TOML.

    ::

        [problem]
        type = "gmm"                  # "gmm", "gaussian" or "constant"
        scheduler = "rectified_flow"  # or "vp_linear"
        weights = [0.5, 0.5]
        means = [[1.0, 0.0], [-1.0, 0.0]]
        scales = [0.3, 0.3]
        # gaussian: mean = [...], scale = 0.5; constant: value = [...]

        [noise]                       # vp_linear only
        beta_min = 0.1
        beta_max = 20.0
    """
    try:
        doc = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise DomainError(f"{path}: {exc}") from None
    table = doc.get("problem")
    if not isinstance(table, dict):
        raise DomainError(f"{path}: missing [problem] table")
    kind = SchedulerKind.parse(table.get("scheduler", "rectified_flow"))
    noise = NoiseSchedule.rectified_flow()
    if kind is SchedulerKind.VP_LINEAR:
        n = doc.get("noise", {})
        noise = NoiseSchedule.vp_linear(n.get("beta_min", 0.1), n.get("beta_max", 20.0),
                                        n.get("t_min", 1e-4))
    ptype = table.get("type")
    if ptype == "gmm":
        comps = MixtureComponents(table["weights"], table["means"], table["scales"])
        return GaussianMixtureField(comps, noise)
    if ptype == "gaussian":
        return GaussianField(table["mean"], table["scale"], noise)
    if ptype == "constant":
        return ConstantField(table["value"], kind, noise if noise.is_vp else None)
    raise DomainError(f"{path}: unknown problem type {ptype!r}")


# --------------------------------------------------------------------------- oracle


def oracle_states(field: VelocityField, x0, times, steps: int = 100_000) -> np.ndarray:
    """Oracle states at sampling-axis ``times`` (shape ``(len(times), B, d)``).

    Integrates like :func:`~solver_forge.fields.oracle_endpoint` and linearly
    interpolates between the two oracle steps around each requested time.
    Requested grid points that coincide with oracle nodes are returned exactly.
    """
    x, squeeze = _as_batch(x0)
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(times > 1):
        raise DomainError("oracle times must lie in [0, 1]")
    grid = np.linspace(0.0, 1.0, steps + 1)
    # oracle step index k with grid[k] <= t < grid[k+1] (k = steps for t = 1)
    k_of = np.minimum(np.floor(times * steps).astype(int), steps)
    out = np.empty((len(times),) + x.shape)
    pending = sorted(range(len(times)), key=lambda i: k_of[i])
    noise = field.noise
    if noise.is_vp:
        tau = sampling_to_vp_time(noise, grid)
        alpha, sigma = vp_alpha_sigma(noise, tau)

    comp = np.zeros_like(x)

    def step(x, comp, k):
        if noise.is_vp:
            ratio = sigma[k + 1] / sigma[k]
            return ratio * x + (alpha[k + 1] - ratio * alpha[k]) * field._eval(x, float(tau[k])), comp
        return kahan_add(x, comp, (grid[k + 1] - grid[k]) * field._eval(x, float(grid[k])))

    p = 0
    for k in range(steps + 1):
        if p == len(pending):
            break
        nxt, comp = (x, comp) if k == steps else step(x, comp, k)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"oracle diverged at step {k}")
        while p < len(pending) and k_of[pending[p]] == k:
            i = pending[p]
            w = times[i] * steps - k
            out[i] = x if w == 0 else (1.0 - w) * x + w * nxt
            p += 1
        x = nxt
    return out[:, 0] if squeeze else out


# --------------------------------------------------------------------------- bench

BENCH_COLUMNS = ("problem", "scheduler", "solver", "nfe", "seed", "endpoint_rmse",
                 "trajectory_rmse", "wall_time")
RF_SOLVERS = ("euler", "heun", "ab2", "ab4")
VP_SOLVERS = ("euler", "heun", "ab2", "ab4", "dpm++2m")


def run_solver(name: str, field: VelocityField, x0, nfe: int, schedule: SolverSchedule | None = None):
    """Run a baseline by name at an NFE budget; returns a Trajectory.

    On VP problems ``euler`` is the first-order exponential (DDIM-type) step,
    ``heun`` is Heun in ``omega = alpha / sigma`` coordinates and ``ab2``/``ab4``
    are exponential Adams-Bashforth in half-log-SNR.  Heun spends two calls
    per step and runs ``nfe // 2`` steps.
    """
    vp = field.noise.is_vp
    if schedule is not None:
        return sample(field, x0, schedule)
    if name == "heun":
        if nfe < 2:
            raise DomainError("heun needs nfe >= 2")
        grid = uniform_grid(nfe // 2)
        if vp:
            return omega_space_sample(heun_sample, field, x0, grid)
        return heun_sample(field, x0, grid)
    grid = uniform_grid(nfe)
    if name == "euler":
        return exp_euler_sample(field, x0, grid) if vp else euler_sample(field, x0, grid)
    if name in ("ab2", "ab4"):
        order = int(name[2])
        if vp:
            return exp_adams_sample(field, x0, grid, order)
        return adams_bashforth_sample(field, x0, grid, order)
    if name == "dpm++2m":
        if not vp:
            raise DomainError("dpm++2m is only defined for VP problems")
        return dpm_solver_pp_2m_sample(field, x0, grid)
    raise DomainError(f"unknown solver {name!r}")


@dataclass
class BenchCell:
    solver: str
    nfe: int
    schedule: SolverSchedule | None = None


@dataclass
class BenchConfig:
    problem: str
    scheduler: str = "rf"
    solvers: tuple = RF_SOLVERS
    nfes: tuple = tuple(range(5, 11))
    seeds: tuple = (0,)
    samples: int = 1024
    oracle_steps: int = 100_000
    schedules: dict = dc_field(default_factory=dict)  # label -> list of schedules
    timing: bool = False
    jobs: int = 1


def bench_cells(cfg: BenchConfig) -> list[BenchCell]:
    cells = [BenchCell(s, n) for s in cfg.solvers for n in cfg.nfes]
    for label, scheds in cfg.schedules.items():
        seen = set()
        for sched in scheds:
            if sched.nfe in seen:
                raise DomainError(f"two schedules labelled {label!r} with nfe {sched.nfe}")
            seen.add(sched.nfe)
            cells.append(BenchCell(label, sched.nfe, sched))
    return cells


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1))))


def run_bench(cfg: BenchConfig) -> list[dict]:
    """One row per (solver, nfe, seed), sorted by problem, solver, nfe, seed."""
    field = make_field(cfg.problem, cfg.scheduler)
    kind = field.noise.kind
    for name in cfg.solvers:
        allowed = VP_SOLVERS if field.noise.is_vp else RF_SOLVERS
        if name not in allowed:
            raise DomainError(f"solver {name!r} not available for {kind.value}; "
                              f"choose from {', '.join(allowed)}")
    cells = bench_cells(cfg)
    for cell in cells:
        if cell.schedule is not None and cell.schedule.kind is not kind:
            raise ScheduleMismatchError(
                f"schedule {cell.solver!r} is for {cell.schedule.kind.value}, problem is {kind.value}")
    rows = []
    for seed in cfg.seeds:
        x0 = rng.standard_normal(seed, (cfg.samples, field.dim), "bench", cfg.problem)

        def work(cell):
            start = time.perf_counter()
            traj = run_solver(cell.solver, field, x0, cell.nfe, cell.schedule)
            return cell, traj, time.perf_counter() - start

        if cfg.jobs > 1:
            with ThreadPoolExecutor(cfg.jobs) as pool:
                results = list(pool.map(work, cells))
        else:
            results = [work(c) for c in cells]
        times = sorted({float(t) for _, traj, _ in results for t in traj.times})
        oracle = oracle_states(field, x0, times, cfg.oracle_steps)
        index = {t: i for i, t in enumerate(times)}
        for cell, traj, elapsed in results:
            ref = oracle[[index[float(t)] for t in traj.times]]
            rows.append(dict(
                problem=cfg.problem,
                scheduler=kind.value,
                solver=cell.solver,
                nfe=cell.nfe,
                seed=seed,
                endpoint_rmse=_rmse(traj.endpoint, ref[-1]),
                trajectory_rmse=_rmse(traj.states[1:], ref[1:]),
                wall_time=elapsed if cfg.timing else None,
            ))
    rows.sort(key=lambda r: (r["problem"], r["scheduler"], r["solver"], r["nfe"], r["seed"]))
    return rows


def format_bench_csv(rows: list[dict]) -> str:
    lines = [",".join(BENCH_COLUMNS)]
    for r in rows:
        vals = []
        for col in BENCH_COLUMNS:
            v = r[col]
            if v is None:
                vals.append("")
            elif isinstance(v, float):
                vals.append(repr(v))
            else:
                vals.append(str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- bound check


@dataclass
class BoundTrial:
    trial: int
    deviation: float
    bound: float
    propagated: float

    @property
    def violated(self) -> bool:
        return self.deviation > self.bound


def bound_check(schedule: SolverSchedule, base: VelocityField, eta: float, trials: int = 100,
                seed: int = 0, samples: int = 256) -> list[BoundTrial]:
    """Model-error bound ``||x_N - x_N'||_1 <= eta * sum_i sum_j |M_ij| dt_i``.

    Each trial perturbs ``base`` with a freshly seeded :class:`PerturbedField`
    (L1 gap at most ``eta``) and runs the schedule.  ``deviation`` is the
    largest L1 distance, over the ``samples`` start points, between that
    endpoint and the endpoint assembled from the same states with the base
    outputs, ``x_0 + sum_i dt_i sum_j M_ij v(x_j)``.  ``propagated`` is the
    distance to an independent run with the base field; it also contains the
    flow's amplification of earlier errors and is reported for information.
    """
    if schedule.kind is not SchedulerKind.RECTIFIED_FLOW or base.noise.is_vp:
        raise DomainError("the bound check applies to rectified-flow schedules")
    if eta < 0:
        raise DomainError(f"eta must be non-negative, got {eta}")
    factor = eta * schedule.error_bound_factor()
    x0 = rng.standard_normal(seed, (samples, base.dim), "bound", "start")
    clean = sample(base, x0, schedule).endpoint
    h = schedule.steps
    out = []
    for trial in range(trials):
        pert = PerturbedField(base, eta, seed=rng.stream_id("bound", seed, trial) % (1 << 63))
        traj = sample(pert, x0, schedule)
        base_evals = [base(traj.states[i], traj.times[i]) for i in range(schedule.nfe)]
        x = np.array(x0, dtype=float)
        for i in range(schedule.nfe):
            acc = sum(schedule.M[i, j] * base_evals[j] for j in range(i + 1))
            x = x + h[i] * acc
        dev = float(np.max(np.sum(np.abs(traj.endpoint - x), axis=-1)))
        prop = float(np.max(np.sum(np.abs(traj.endpoint - clean), axis=-1)))
        out.append(BoundTrial(trial, dev, factor, prop))
    return out


def hand_bound(schedule: SolverSchedule, eta: float) -> float:
    """``eta * sum_i sum_j |M_ij| dt_i`` by a plain double loop."""
    total = math.fsum(abs(float(schedule.M[i, j])) * float(schedule.steps[i])
                      for i in range(schedule.nfe) for j in range(i + 1))
    return eta * total
