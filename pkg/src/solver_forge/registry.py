"""Schedule files and the bundled published schedules.

File format (version 1) is a TOML document, one schedule per file::

    format_version = 1
    scheduler = "rectified_flow"        # or "vp_linear"
    model_tag = "sit-xl-2"
    nfe = 3
    deltas = [0.2, 0.3, 0.5]            # nfe positive entries, sum within 2e-3 of 1
    coeffs = [                          # row i holds the i strictly-lower entries c_i^j
        [],
        [-1.17],
        [1.07, -1.83],
    ]
    max_order = [0, 0, 1]               # optional; int or per-row list, 0 = no cap

    [noise]                             # required for vp_linear
    beta_min = 0.1
    beta_max = 20.0
    t_min = 0.0001

    [provenance]                        # free-form; "source" is paper_table or searched
    source = "searched"
    config_hash = "0123456789abcdef"
    seed = 0

Floats are written with ``repr`` (shortest round-trip form), so saving and
loading reproduces every value bit for bit.
"""
from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass, field as dc_field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ScheduleFormatError, ScheduleMismatchError, ScheduleValidationError
from .schedules import NoiseSchedule, SchedulerKind
from .solvers import SolverSchedule

FORMAT_VERSION = 1
DELTA_SUM_TOL = 2e-3
_NORMALIZED_TOL = 1e-12
DATA_ENV = "SOLVER_FORGE_DATA"
PAPER_MODELS = {
    "sit-xl-2": SchedulerKind.RECTIFIED_FLOW,
    "flowdcn-b-2": SchedulerKind.RECTIFIED_FLOW,
    "dit-xl-2": SchedulerKind.VP_LINEAR,
}
PAPER_NFES = tuple(range(5, 11))


def data_dir() -> Path:
    override = os.environ.get(DATA_ENV)
    if override:
        return Path(override)
    return Path(str(resources.files("solver_forge") / "data"))


def paper_table_path(model_tag: str, nfe: int) -> Path:
    return data_dir() / f"{model_tag}_nfe{nfe}.toml"


# --------------------------------------------------------------------------- writing


def _fmt_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            raise ScheduleValidationError(f"cannot serialize non-finite value {v}")
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_scalar(x) for x in v) + "]"
    raise TypeError(f"unsupported value {v!r}")


def dumps(doc: dict) -> str:
    lines = []
    tables = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            tables[key] = value
        elif key == "coeffs":
            lines.append("coeffs = [")
            lines.extend(f"    {_fmt_scalar(list(row))}," for row in value)
            lines.append("]")
        else:
            lines.append(f"{key} = {_fmt_scalar(value)}")
    for name, table in tables.items():
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt_scalar(v)}" for k, v in table.items() if v is not None)
    return "\n".join(lines) + "\n"


def schedule_document(schedule: SolverSchedule, model_tag: str = "", provenance: dict | None = None):
    doc = {
        "format_version": FORMAT_VERSION,
        "scheduler": schedule.kind.value,
        "model_tag": model_tag or schedule.provenance.get("model_tag", ""),
        "nfe": schedule.nfe,
        "deltas": [float(d) for d in schedule.deltas],
        "coeffs": schedule.coefficient_rows(),
    }
    if schedule.max_order is not None:
        doc["max_order"] = [0 if m is None else int(m) for m in schedule.max_order]
    if schedule.noise.is_vp:
        n = schedule.noise
        doc["noise"] = {"beta_min": n.beta_min, "beta_max": n.beta_max, "t_min": n.t_min}
    prov = dict(schedule.provenance if provenance is None else provenance)
    prov.pop("model_tag", None)
    prov.pop("original_deltas", None)
    prov.pop("renormalization", None)
    doc["provenance"] = {k: v for k, v in prov.items() if v is not None}
    return doc


def save_schedule(schedule: SolverSchedule, path, model_tag: str = "", provenance: dict | None = None):
    Path(path).write_text(dumps(schedule_document(schedule, model_tag, provenance)))


# --------------------------------------------------------------------------- reading


def _require(doc: dict, key: str, types):
    if key not in doc:
        raise ScheduleValidationError(f"missing field '{key}'")
    value = doc[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise ScheduleValidationError(f"field '{key}' has wrong type {type(value).__name__}")
    return value


def parse_schedule(text: str, source: str = "<string>") -> SolverSchedule:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScheduleFormatError(f"{source}: parse error: {exc}") from None
    try:
        return schedule_from_document(doc)
    except ScheduleValidationError as exc:
        raise type(exc)(f"{source}: {exc}") from None


def schedule_from_document(doc: dict) -> SolverSchedule:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ScheduleFormatError(
            f"format_version {version!r} not supported (expected {FORMAT_VERSION})"
        )
    try:
        kind = SchedulerKind.parse(_require(doc, "scheduler", str))
    except ValueError as exc:
        raise ScheduleValidationError(f"field 'scheduler': {exc}") from None
    model_tag = doc.get("model_tag", "")
    nfe = _require(doc, "nfe", int)
    if nfe < 1:
        raise ScheduleValidationError(f"field 'nfe' must be >= 1, got {nfe}")
    deltas = _require(doc, "deltas", list)
    if len(deltas) != nfe:
        raise ScheduleValidationError(f"field 'deltas' has {len(deltas)} entries, nfe is {nfe}")
    deltas = np.array([float(d) for d in deltas])
    for i, d in enumerate(deltas):
        if not (math.isfinite(d) and d > 0):
            raise ScheduleValidationError(f"field 'deltas' row {i}: value {d} is not positive")
    total = math.fsum(deltas)
    if abs(total - 1.0) > DELTA_SUM_TOL:
        raise ScheduleValidationError(
            f"field 'deltas' rows 0-{nfe - 1}: sum {total!r} deviates from 1 by "
            f"{abs(total - 1.0):.3g} (tolerance {DELTA_SUM_TOL})"
        )
    coeffs = _require(doc, "coeffs", list)
    if len(coeffs) != nfe:
        raise ScheduleValidationError(f"field 'coeffs' has {len(coeffs)} rows, nfe is {nfe}")
    rows = []
    for i, row in enumerate(coeffs):
        if not isinstance(row, list) or len(row) != i:
            n = len(row) if isinstance(row, list) else "?"
            raise ScheduleValidationError(f"field 'coeffs' row {i} has {n} entries, expected {i}")
        vals = [float(v) for v in row]
        if not all(math.isfinite(v) for v in vals):
            raise ScheduleValidationError(f"field 'coeffs' row {i} has a non-finite entry")
        rows.append(vals)

    max_order = doc.get("max_order")
    if isinstance(max_order, list):
        max_order = [None if m == 0 else m for m in max_order]

    if kind is SchedulerKind.VP_LINEAR:
        table = doc.get("noise")
        if not isinstance(table, dict):
            raise ScheduleValidationError("vp_linear schedules need a [noise] table")
        noise = NoiseSchedule.vp_linear(
            float(table.get("beta_min", 0.1)),
            float(table.get("beta_max", 20.0)),
            float(table.get("t_min", 1e-4)),
        )
    else:
        noise = NoiseSchedule.rectified_flow()

    provenance = dict(doc.get("provenance", {}))
    provenance["model_tag"] = model_tag
    factor = 1.0
    if abs(total - 1.0) > _NORMALIZED_TOL:
        factor = 1.0 / total
        provenance["original_deltas"] = [float(d) for d in deltas]
        deltas = deltas / total
    provenance["renormalization"] = factor

    schedule = SolverSchedule.from_deltas(deltas, rows, noise, max_order, provenance)
    _check_rows(schedule)
    return schedule


def _check_rows(schedule: SolverSchedule) -> None:
    for i in range(schedule.nfe):
        row = schedule.M[i, : i + 1]
        # the diagonal must be the correctly rounded complement of the row
        if row[i] != -math.fsum([*row[:i], -1.0]):
            raise ScheduleValidationError(f"coefficient row {i} does not sum to 1")


def load_schedule(path, expect_noise: NoiseSchedule | None = None) -> SolverSchedule:
    """Load and validate a schedule file.

    ``expect_noise`` refuses schedules built for another scheduler or beta range.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScheduleFormatError(f"{path}: {exc}") from None
    schedule = parse_schedule(text, str(path))
    if expect_noise is not None:
        check_compatible(schedule, expect_noise)
    return schedule


def check_compatible(schedule: SolverSchedule, noise: NoiseSchedule) -> None:
    if schedule.kind is not noise.kind:
        raise ScheduleMismatchError(
            f"schedule is for {schedule.kind.value}, target uses {noise.kind.value}"
        )
    if noise.is_vp and (schedule.noise.beta_min, schedule.noise.beta_max) != (
        noise.beta_min,
        noise.beta_max,
    ):
        raise ScheduleMismatchError(
            "searched schedules do not transfer across beta ranges: schedule has "
            f"({schedule.noise.beta_min}, {schedule.noise.beta_max}), target has "
            f"({noise.beta_min}, {noise.beta_max})"
        )


def load_paper_schedule(model_tag: str, nfe: int) -> SolverSchedule:
    return load_schedule(paper_table_path(model_tag, nfe))


def paper_schedules():
    """Yield ``(model_tag, nfe, schedule)`` for every bundled table."""
    for tag in PAPER_MODELS:
        for nfe in PAPER_NFES:
            yield tag, nfe, load_paper_schedule(tag, nfe)


# --------------------------------------------------------------------------- validation


@dataclass
class TableReport:
    name: str
    ok: bool
    nfe: int = 0
    scheduler: str = ""
    delta_sum: float = float("nan")
    delta_sum_deviation: float = float("nan")
    max_abs_coeff: float = float("nan")
    max_row_sum_error: float = float("nan")
    capped_rows: list = dc_field(default_factory=list)
    last_two_capped: bool = False
    errors: list = dc_field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def single_lookback_rows(schedule: SolverSchedule) -> list[int]:
    """Rows ``i >= 2`` whose only nonzero strictly-lower coefficient is ``c_i^{i-1}``."""
    rows = []
    for i in range(2, schedule.nfe):
        off = schedule.M[i, :i]
        if np.all(off[: i - 1] == 0.0) and off[i - 1] != 0.0:
            rows.append(i)
    return rows


def validate_file(path) -> TableReport:
    path = Path(path)
    name = path.stem
    try:
        sched = load_schedule(path)
    except ScheduleValidationError as exc:
        return TableReport(name, False, errors=[str(exc)])
    return report_for(name, sched)


def report_for(name: str, sched: SolverSchedule) -> TableReport:
    original = sched.provenance.get("original_deltas")
    dsum = math.fsum(original) if original is not None else math.fsum(sched.deltas)
    off = [abs(v) for row in sched.coefficient_rows() for v in row]
    row_err = max(abs(math.fsum(sched.M[i, : i + 1]) - 1.0) for i in range(sched.nfe))
    capped = single_lookback_rows(sched)
    n = sched.nfe
    return TableReport(
        name,
        True,
        nfe=n,
        scheduler=sched.kind.value,
        delta_sum=dsum,
        delta_sum_deviation=abs(dsum - 1.0),
        max_abs_coeff=max(off) if off else 0.0,
        max_row_sum_error=row_err,
        capped_rows=capped,
        last_two_capped=n >= 4 and {n - 2, n - 1} <= set(capped),
    )


def validate_paper_tables() -> list[TableReport]:
    reports = []
    for tag, expected_kind in PAPER_MODELS.items():
        for nfe in PAPER_NFES:
            path = paper_table_path(tag, nfe)
            rep = validate_file(path)
            if rep.ok and rep.scheduler != expected_kind.value:
                rep.ok = False
                rep.errors.append(f"scheduler {rep.scheduler} but {tag} is {expected_kind.value}")
            if rep.ok and rep.nfe != nfe:
                rep.ok = False
                rep.errors.append(f"nfe {rep.nfe} does not match file name")
            if rep.ok and nfe in (5, 6) and not rep.last_two_capped:
                rep.ok = False
                rep.errors.append("last two rows are not limited to one lookback coefficient")
            reports.append(rep)
    return reports
