import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from solver_forge import problems, registry
from solver_forge.errors import ScheduleFormatError, ScheduleMismatchError, ScheduleValidationError
from solver_forge.schedules import DIT_SCHEDULE, NoiseSchedule
from solver_forge.search import SearchConfig, run_search
from solver_forge.solvers import build_schedule, sample

SIT5 = [0.0424, 0.1225, 0.2144, 0.3073, 0.3135]
DIT5 = [0.2582, 0.1766, 0.1766, 0.2156, 0.1731]


def _write(tmp_path, text, name="s.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


VALID = """format_version = 1
scheduler = "rectified_flow"
model_tag = "toy"
nfe = 3
deltas = [0.2, 0.3, 0.5]
coeffs = [
    [],
    [-0.5],
    [0.25, -1.0],
]
"""


def test_sit_nfe5_deltas():
    s = registry.load_paper_schedule("sit-xl-2", 5)
    orig = s.provenance["original_deltas"]
    assert orig == SIT5
    assert math.fsum(orig) == pytest.approx(1.0001, abs=1e-12)
    assert s.provenance["renormalization"] == pytest.approx(1 / 1.0001)
    assert s.deltas == pytest.approx(np.array(SIT5) / 1.0001, rel=1e-15)
    assert math.fsum(s.deltas) == pytest.approx(1.0, abs=1e-15)


def test_dit_nfe5_deltas():
    s = registry.load_paper_schedule("dit-xl-2", 5)
    assert s.provenance["original_deltas"] == DIT5
    assert s.noise == DIT_SCHEDULE and s.provenance["model_tag"] == "dit-xl-2"


def test_exact_sum_not_renormalized(tmp_path):
    s = registry.load_schedule(_write(tmp_path, VALID))
    assert s.deltas.tolist() == [0.2, 0.3, 0.5]
    assert s.provenance["renormalization"] == 1.0
    assert "original_deltas" not in s.provenance
    assert s.M[2].tolist() == [0.25, -1.0, 1.75]


def test_single_step_file_is_euler(tmp_path):
    text = 'format_version = 1\nscheduler = "rectified_flow"\nnfe = 1\ndeltas = [1.0]\ncoeffs = [[]]\n'
    s = registry.load_schedule(_write(tmp_path, text))
    assert s.M.tolist() == [[1.0]] and s.times.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("old,new,err,match", [
    ("deltas = [0.2, 0.3, 0.5]", "deltas = [0.1, 0.3, 0.5]", ScheduleValidationError, "deltas.*sum"),
    ("deltas = [0.2, 0.3, 0.5]", "deltas = [0.2, -0.3, 1.1]", ScheduleValidationError, "row 1"),
    ("deltas = [0.2, 0.3, 0.5]", "deltas = [0.5, 0.5]", ScheduleValidationError, "'deltas' has 2"),
    ("    [-0.5],\n", "    [-0.5, 1.0],\n", ScheduleValidationError, "row 1 has 2 entries"),
    ("    [0.25, -1.0],\n", "    [0.25],\n", ScheduleValidationError, "row 2 has 1"),
    ("format_version = 1", "format_version = 2", ScheduleFormatError, "format_version"),
    ("nfe = 3", "nfe = ", ScheduleFormatError, "parse error"),
    ('scheduler = "rectified_flow"', 'scheduler = "cosine"', ScheduleValidationError, "scheduler"),
    ("nfe = 3\n", "", ScheduleValidationError, "missing field 'nfe'"),
    ('scheduler = "rectified_flow"', 'scheduler = "vp_linear"', ScheduleValidationError, r"\[noise\]"),
])
def test_invalid_files(tmp_path, old, new, err, match):
    assert old in VALID
    with pytest.raises(err, match=match):
        registry.load_schedule(_write(tmp_path, VALID.replace(old, new)))


def test_missing_file(tmp_path):
    with pytest.raises(ScheduleFormatError):
        registry.load_schedule(tmp_path / "nope.toml")


@pytest.mark.parametrize("tag", sorted(registry.PAPER_MODELS))
@pytest.mark.parametrize("nfe", registry.PAPER_NFES)
def test_bundled_table_round_trip(tmp_path, tag, nfe):
    s = registry.load_paper_schedule(tag, nfe)
    registry.save_schedule(s, tmp_path / "rt.toml", model_tag=tag)
    t = registry.load_schedule(tmp_path / "rt.toml")
    assert np.array_equal(s.deltas, t.deltas)
    assert np.array_equal(s.M, t.M)
    assert t.provenance["source"] == "paper_table" and t.noise == s.noise


@settings(max_examples=100)
@given(n=st.integers(1, 10), data=st.data(), vp=st.booleans())
def test_random_round_trip(tmp_path_factory, n, data, vp):
    r = data.draw(hnp.arrays(float, n, elements=st.floats(-3, 3)))
    c = data.draw(hnp.arrays(float, (n, n), elements=st.floats(-10, 10, allow_subnormal=True)))
    cap = data.draw(st.one_of(st.none(), st.integers(1, 3)))
    s = build_schedule(r, np.tril(c, -1), DIT_SCHEDULE if vp else "rf", cap)
    path = tmp_path_factory.mktemp("rt") / "s.toml"
    registry.save_schedule(s, path)
    t = registry.load_schedule(path)
    assert np.array_equal(s.deltas, t.deltas)
    assert np.array_equal(s.M, t.M)
    assert t.max_order == s.max_order and t.noise == s.noise


def test_searched_provenance(tmp_path):
    cfg = SearchConfig(nfe=3, ref_steps=20, batch=16, val_batch=16, iterations=3)
    res = run_search(problems.make_field("gmm2d"), cfg)
    registry.save_schedule(res.schedule, tmp_path / "s.toml", model_tag="gmm2d")
    t = registry.load_schedule(tmp_path / "s.toml")
    assert t.provenance["source"] == "searched"
    assert t.provenance["config_hash"] == cfg.config_hash()
    assert t.provenance["seed"] == 0
    assert np.array_equal(t.M, res.schedule.M)


def test_dit_tiny_value_preserved():
    s = registry.load_paper_schedule("dit-xl-2", 7)
    assert -1.4901e-08 in [v for row in s.coefficient_rows() for v in row]


def test_validate_bundled_tables():
    reports = registry.validate_paper_tables()
    assert len(reports) == 18 and all(r.ok for r in reports)
    assert all(r.delta_sum_deviation <= 2e-3 for r in reports)
    biggest = max(reports, key=lambda r: r.max_abs_coeff)
    assert biggest.name == "flowdcn-b-2_nfe10" and biggest.max_abs_coeff == 7.8801
    by_name = {r.name: r for r in reports}
    assert by_name["sit-xl-2_nfe5"].capped_rows == [3, 4]
    for tag in registry.PAPER_MODELS:
        for nfe in (5, 6):
            assert by_name[f"{tag}_nfe{nfe}"].last_two_capped
    assert by_name["sit-xl-2_nfe5"].delta_sum == pytest.approx(1.0001, abs=1e-12)


def test_sit_nfe5_rows_3_4_single_lookback():
    s = registry.load_paper_schedule("sit-xl-2", 5)
    for i in (3, 4):
        assert np.count_nonzero(s.M[i, :i]) == 1 and s.M[i, i - 1] != 0


def test_validate_reports_failure(tmp_path):
    p = _write(tmp_path, VALID.replace("[0.2, 0.3, 0.5]", "[0.2, 0.2, 0.5]"), "bad.toml")
    rep = registry.validate_file(p)
    assert not rep.ok and "deltas" in rep.errors[0]


def test_data_dir_override(tmp_path, monkeypatch):
    shutil.copy(registry.paper_table_path("sit-xl-2", 5), tmp_path / "sit-xl-2_nfe5.toml")
    text = (tmp_path / "sit-xl-2_nfe5.toml").read_text().replace("0.0424", "0.0425")
    (tmp_path / "sit-xl-2_nfe5.toml").write_text(text)
    monkeypatch.setenv(registry.DATA_ENV, str(tmp_path))
    s = registry.load_paper_schedule("sit-xl-2", 5)
    assert s.provenance["original_deltas"][0] == 0.0425


def test_beta_range_refused():
    s = registry.load_paper_schedule("dit-xl-2", 8)
    registry.check_compatible(s, DIT_SCHEDULE)
    with pytest.raises(ScheduleMismatchError, match="beta"):
        registry.check_compatible(s, NoiseSchedule.vp_linear(0.1, 10.0))
    with pytest.raises(ScheduleMismatchError):
        registry.check_compatible(s, NoiseSchedule.rectified_flow())


@pytest.mark.parametrize("tag", sorted(registry.PAPER_MODELS))
def test_bundled_tables_run(tag):
    kind = "vp" if registry.PAPER_MODELS[tag].value == "vp_linear" else "rf"
    fld = problems.make_field("gmm2d", kind)
    x0 = np.random.default_rng(0).standard_normal((64, 2))
    for nfe in registry.PAPER_NFES:
        out = sample(fld, x0, registry.load_paper_schedule(tag, nfe)).states
        assert np.all(np.isfinite(out))
