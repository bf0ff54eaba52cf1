"""``solver-forge`` command line.

Exit codes: 0 success, 1 validation failure (bad schedule file, bound
violation), 2 usage or configuration error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import problems, registry, rng
from .errors import DivergenceError, DomainError, ScheduleMismatchError, ScheduleValidationError
from .schedules import RESPACE_FAMILIES, respace_grid
from .search import SearchConfig, run_search
from .solvers import SolverSchedule

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _parse_max_order(text: str | None, nfe: int):
    if text is None:
        return None
    if text == "last2":
        return tuple([None] * max(nfe - 2, 0) + [1] * min(nfe, 2))
    try:
        if "," in text:
            caps = [int(v) for v in text.split(",")]
            return tuple(None if c == 0 else c for c in caps)
        cap = int(text)
    except ValueError:
        raise UsageError(f"--max-order must be an int, a comma list or 'last2', got {text!r}") from None
    return None if cap == 0 else cap


def _parse_int_range(text: str) -> tuple[int, ...]:
    """``5-10``, ``5,8,10`` or ``7``."""
    try:
        out = []
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"cannot parse range {text!r}") from None
    if not out:
        raise UsageError(f"empty range {text!r}")
    return tuple(sorted(set(out)))


def _schedule_arg(text: str) -> SolverSchedule:
    """A schedule file path, or ``MODEL_TAG:NFE`` for a bundled table."""
    if ":" in text and not Path(text).exists():
        tag, nfe = text.rsplit(":", 1)
        if tag in registry.PAPER_MODELS:
            return registry.load_paper_schedule(tag, int(nfe))
    return registry.load_schedule(text)


def _fmt(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------- commands


def cmd_search(args) -> int:
    field = problems.make_field(args.problem, args.scheduler)
    cfg = SearchConfig(
        nfe=args.nfe,
        ref_steps=args.ref_steps,
        batch=args.batch,
        iterations=args.iters,
        lr=args.lr,
        seed=args.seed,
        max_order=_parse_max_order(args.max_order, args.nfe),
        val_batch=args.val_batch or args.batch,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = run_search(field, cfg)
    out = Path(args.out)
    tag = args.model_tag or f"{Path(args.problem).stem}-{field.noise.kind.value}"
    registry.save_schedule(result.schedule, out, model_tag=tag)
    history = Path(args.history) if args.history else out.with_suffix(".loss.csv")
    result.write_history(history)
    print(f"schedule: {out}")
    print(f"loss history: {history}")
    print(f"euler loss: {_fmt(result.initial_loss)}")
    print(f"final loss: {_fmt(result.best_loss)} (iteration {result.best_iteration})")
    print(f"improvement factor: {_fmt(result.improvement)}")
    if result.diverged:
        print("search diverged; kept the best schedule before divergence", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_bench(args) -> int:
    field_kind = problems.make_field(args.problem, args.scheduler).noise
    default = problems.VP_SOLVERS if field_kind.is_vp else problems.RF_SOLVERS
    solvers = tuple(s.strip() for s in args.solvers.split(",") if s.strip()) if args.solvers else default
    schedules = {}
    for item in args.schedule or []:
        label, _, path = item.rpartition("=")
        sched = _schedule_arg(path)
        if not label:
            label = "searched" if sched.provenance.get("source") == "searched" else (
                sched.provenance.get("model_tag") or Path(path).stem)
        if label in solvers:
            raise UsageError(f"schedule label {label!r} clashes with a solver name")
        schedules.setdefault(label, []).append(sched)
    cfg = problems.BenchConfig(
        problem=args.problem,
        scheduler=args.scheduler,
        solvers=solvers,
        nfes=_parse_int_range(args.nfe_range),
        seeds=_parse_int_range(args.seeds),
        samples=args.samples,
        oracle_steps=args.oracle_steps,
        schedules=schedules,
        timing=args.timing,
        jobs=args.jobs,
    )
    rows = problems.run_bench(cfg)
    text = problems.format_bench_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    if not args.file and not args.paper_tables:
        raise UsageError("give --file PATH (repeatable) or --paper-tables")
    reports = []
    if args.paper_tables:
        reports.extend(registry.validate_paper_tables())
    for path in args.file or []:
        reports.append(registry.validate_file(path))
    for r in reports:
        if r.ok:
            cap = f" capped rows {r.capped_rows}" if r.capped_rows else ""
            print(f"PASS {r.name}: nfe {r.nfe}, delta-sum deviation {r.delta_sum_deviation:.4g}, "
                  f"max |c| {r.max_abs_coeff:g}{cap}")
        else:
            print(f"FAIL {r.name}: {'; '.join(r.errors)}")
    n_ok = sum(r.ok for r in reports)
    print(f"{n_ok}/{len(reports)} passed")
    if args.json:
        Path(args.json).write_text(json.dumps([r.as_dict() for r in reports], indent=2) + "\n")
    return EXIT_OK if n_ok == len(reports) else EXIT_INVALID


def cmd_bound_check(args) -> int:
    schedule = _schedule_arg(args.schedule)
    field = problems.make_field(args.problem, "rf")
    trials = problems.bound_check(schedule, field, args.eta, args.trials, args.seed, args.samples)
    bound = problems.hand_bound(schedule, args.eta)
    print(f"bound eta * sum|M_ij| dt_i = {_fmt(bound)}")
    print("trial,deviation,bound,propagated,violated")
    for t in trials:
        print(f"{t.trial},{_fmt(t.deviation)},{_fmt(t.bound)},{_fmt(t.propagated)},{int(t.violated)}")
    bad = sum(t.violated for t in trials)
    print(f"violations: {bad}/{len(trials)}")
    return EXIT_INVALID if bad else EXIT_OK


def cmd_respace(args) -> int:
    grid = respace_grid(RESPACE_FAMILIES[args.family], args.nfe)
    for t in grid:
        print(_fmt(t))
    return EXIT_OK


def cmd_sample(args) -> int:
    field = problems.make_field(args.problem, args.scheduler)
    x0 = rng.standard_normal(args.seed, (args.samples, field.dim), "sample", args.problem)
    if args.schedule:
        traj = problems.run_solver("schedule", field, x0, 0, _schedule_arg(args.schedule))
    else:
        traj = problems.run_solver(args.solver, field, x0, args.nfe)
    lines = [",".join(f"x{k}" for k in range(field.dim))]
    lines.extend(",".join(_fmt(v) for v in row) for row in np.atleast_2d(traj.endpoint))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solver-forge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log search progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="search a solver schedule on a test problem")
    p.add_argument("--problem", default="gmm2d", help="problem name or problem TOML file")
    p.add_argument("--scheduler", choices=("rf", "vp"), default="rf")
    p.add_argument("--nfe", type=int, required=True)
    p.add_argument("--ref-steps", type=int, default=100)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--val-batch", type=int, default=None, help="validation batch (default: --batch)")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-order", default=None,
                   help="cap on past evaluations per row: int, comma list (0 = none) or 'last2'")
    p.add_argument("--model-tag", default=None)
    p.add_argument("--out", required=True, help="schedule file to write")
    p.add_argument("--history", default=None, help="loss CSV (default: OUT with .loss.csv)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench", help="benchmark solvers against the oracle")
    p.add_argument("--problem", default="gmm2d")
    p.add_argument("--scheduler", choices=("rf", "vp"), default="rf")
    p.add_argument("--solvers", default=None, help="comma list (default: all for the scheduler)")
    p.add_argument("--schedule", action="append",
                   help="[LABEL=]PATH or MODEL_TAG:NFE; repeatable")
    p.add_argument("--nfe-range", default="5-10")
    p.add_argument("--seeds", default="0")
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--oracle-steps", type=int, default=100_000)
    p.add_argument("--timing", action="store_true", help="fill the wall_time column")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="validate schedule files")
    p.add_argument("--file", action="append")
    p.add_argument("--paper-tables", action="store_true", help="validate the bundled tables")
    p.add_argument("--json", default=None, help="write the machine-readable report here")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bound-check", help="check the model-error bound under perturbation")
    p.add_argument("--schedule", default="sit-xl-2:10")
    p.add_argument("--problem", default="gmm2d")
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("respace", help="print a respaced time grid")
    p.add_argument("--family", choices=sorted(RESPACE_FAMILIES), required=True)
    p.add_argument("--nfe", type=int, required=True)
    p.set_defaults(func=cmd_respace)

    p = sub.add_parser("sample", help="write endpoint samples of one solver")
    p.add_argument("--problem", default="gmm2d")
    p.add_argument("--scheduler", choices=("rf", "vp"), default="rf")
    p.add_argument("--solver", default="euler")
    p.add_argument("--schedule", default=None)
    p.add_argument("--nfe", type=int, default=10)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ScheduleValidationError as exc:
        print(f"invalid schedule: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, DomainError, ScheduleMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
