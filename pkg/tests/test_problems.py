import numpy as np
import pytest

from solver_forge import problems, registry
from solver_forge.errors import DomainError
from solver_forge.fields import oracle_endpoint
from solver_forge.solvers import SolverSchedule


@pytest.mark.parametrize("name", problems.PROBLEMS)
def test_rf_problems_build(name):
    fld = problems.make_field(name, "rf")
    assert fld.dim == 2 and np.all(np.isfinite(fld(np.ones(2), 0.5)))


@pytest.mark.parametrize("name", problems.VP_PROBLEMS)
def test_vp_problems_build(name):
    assert problems.make_field(name, "vp").noise.is_vp


@pytest.mark.parametrize("name,kind", [("nope", "rf"), ("linear", "vp"), ("sine", "vp")])
def test_bad_problem(name, kind):
    with pytest.raises(DomainError):
        problems.make_field(name, kind)


def test_load_problem(tmp_path):
    p = tmp_path / "p.toml"
    p.write_text('[problem]\ntype = "gmm"\nscheduler = "vp_linear"\nweights = [0.5, 0.5]\n'
                 'means = [[1.0, 0.0], [-1.0, 0.0]]\nscales = [0.3, 0.3]\n[noise]\nbeta_max = 10.0\n')
    fld = problems.make_field(str(p))
    assert fld.noise.beta_max == 10.0 and fld.dim == 2
    p.write_text('[problem]\ntype = "constant"\nvalue = [1.0, 2.0, 3.0]\n')
    assert problems.load_problem(p).dim == 3
    p.write_text('[problem]\ntype = "cube"\n')
    with pytest.raises(DomainError):
        problems.load_problem(p)


@pytest.mark.parametrize("kind", ["rf", "vp"])
def test_oracle_states_consistent(kind):
    fld = problems.make_field("gmm2d", kind)
    x0 = np.random.default_rng(0).standard_normal((8, 2))
    out = problems.oracle_states(fld, x0, [1.0, 0.0, 0.5, 0.50005], 2000)
    assert np.array_equal(out[0], oracle_endpoint(fld, kind, x0, 2000))
    assert np.array_equal(out[1], x0)
    # 0.50005 sits a tenth of the way into oracle step 1000
    step = problems.oracle_states(fld, x0, [0.5, 0.5005], 2000)
    assert out[3] == pytest.approx(0.9 * step[0] + 0.1 * step[1], abs=1e-14)


def test_run_solver_errors(gmm_rf):
    x0 = np.zeros((1, 2))
    with pytest.raises(DomainError):
        problems.run_solver("dpm++2m", gmm_rf, x0, 5)
    with pytest.raises(DomainError):
        problems.run_solver("rk45", gmm_rf, x0, 5)


def test_bench_constant_exact():
    rows = problems.run_bench(problems.BenchConfig("constant", samples=256))
    assert rows and all(r["endpoint_rmse"] < 1e-12 and r["trajectory_rmse"] < 1e-12 for r in rows)
    rows = problems.run_bench(problems.BenchConfig("constant", "vp", solvers=problems.VP_SOLVERS,
                                                   samples=256))
    assert all(r["endpoint_rmse"] < 1e-12 for r in rows)


def test_bench_rows_sorted_unique_deterministic():
    cfg = problems.BenchConfig("gmm2d", nfes=(5, 6), seeds=(0, 1), samples=64, oracle_steps=2000,
                               schedules={"sit": [registry.load_paper_schedule("sit-xl-2", 5)]})
    rows = problems.run_bench(cfg)
    keys = [(r["problem"], r["solver"], r["nfe"], r["seed"]) for r in rows]
    assert len(keys) == len(set(keys)) == 4 * 2 * 2 + 2
    assert keys == sorted(keys)
    assert all(r["wall_time"] is None for r in rows)
    text = problems.format_bench_csv(rows)
    assert text.splitlines()[0] == ",".join(problems.BENCH_COLUMNS)
    cfg.jobs = 3
    assert problems.format_bench_csv(problems.run_bench(cfg)) == text


def test_bench_timing_column():
    cfg = problems.BenchConfig("gmm2d", solvers=("euler",), nfes=(5,), samples=16,
                               oracle_steps=500, timing=True)
    assert problems.run_bench(cfg)[0]["wall_time"] >= 0


def test_bench_duplicate_schedule_nfe():
    s = registry.load_paper_schedule("sit-xl-2", 5)
    with pytest.raises(DomainError):
        problems.bench_cells(problems.BenchConfig("gmm2d", schedules={"a": [s, s]}))


def test_bound_zero_eta():
    s = registry.load_paper_schedule("sit-xl-2", 10)
    trials = problems.bound_check(s, problems.make_field("gmm2d"), 0.0, trials=3, samples=32)
    assert all(t.deviation == 0.0 and t.propagated == 0.0 and t.bound == 0.0 for t in trials)


def test_bound_value_matches_hand_sum():
    s = registry.load_paper_schedule("flowdcn-b-2", 7)
    trials = problems.bound_check(s, problems.make_field("gmm2d"), 0.05, trials=2, samples=16)
    hand = 0.0
    for i in range(s.nfe):
        for j in range(i + 1):
            hand += abs(s.M[i][j]) * (s.times[i + 1] - s.times[i])
    assert trials[0].bound == pytest.approx(0.05 * hand, rel=1e-13)
    assert problems.hand_bound(s, 0.05) == pytest.approx(0.05 * hand, rel=1e-13)


def test_bound_rejects_vp():
    with pytest.raises(DomainError):
        problems.bound_check(SolverSchedule.euler(3, "vp"), problems.make_field("gmm2d", "vp"), 0.1)
