import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from solver_forge import problems
from solver_forge.errors import DomainError
from solver_forge.fields import (
    ConstantField,
    GaussianMixtureField,
    LinearField,
    MixtureComponents,
    PerturbedField,
    SineLinearField,
    TimePowerField,
    Trajectory,
    oracle_endpoint,
    rf_gaussian_velocity,
    rf_gmm2d_velocity,
    vp_gaussian_xbar,
)
from solver_forge.schedules import DIT_SCHEDULE, vp_alpha_sigma

MC = 1_000_000


def _mc_posterior(comps, x, a, b, target, seed):
    """Self-normalised importance estimate of E[target | x_t = x] with prior draws."""
    gen = np.random.default_rng(seed)
    x0 = comps.sample(MC, gen)
    logw = -np.sum((x - a * x0) ** 2, axis=1) / (2 * b * b)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    eps = (x - a * x0) / b
    val = x0 - eps if target == "velocity" else x0
    return w @ val


# --- closed forms -------------------------------------------------------------


def test_gaussian_symmetric_time():
    assert rf_gaussian_velocity([0.0], 1.0, [3.7], 0.5) == pytest.approx([0.0], abs=1e-15)


def test_gaussian_value():
    assert rf_gaussian_velocity([0.0], 1.0, [1.0], 0.75) == pytest.approx([0.8], rel=1e-14)


def test_gaussian_delta_limit():
    assert rf_gaussian_velocity([2.0], 0.0, [0.0], 0.0) == pytest.approx([2.0])


def test_gaussian_delta_singular_at_data_end():
    with pytest.raises(ArithmeticError):
        rf_gaussian_velocity([2.0], 0.0, [2.0], 1.0)


def test_gaussian_regression_monte_carlo():
    # (x0 - eps) regressed on x_t: joint Gaussian, so the regression is the posterior mean
    gen = np.random.default_rng(1)
    mu, s, t = 0.3, 0.7, 0.6
    x0 = mu + s * gen.standard_normal(MC)
    eps = gen.standard_normal(MC)
    xt = t * x0 + (1 - t) * eps
    slope, icpt = np.polyfit(xt, x0 - eps, 1)
    for x in (-1.0, 0.0, 0.8, 1.5, 2.0):
        mc = slope * x + icpt
        assert rf_gaussian_velocity([mu], s, [x], t)[0] == pytest.approx(mc, abs=1e-2)


@pytest.mark.parametrize("x,t", [((0.3, -0.1), 0.4), ((1.0, 0.5), 0.7), ((-0.6, 1.1), 0.85),
                                 ((0.0, 0.0), 0.2), ((-1.2, -0.9), 0.55)])
def test_gmm_velocity_monte_carlo(x, t):
    comps = problems.GMM2D
    x = np.array(x)
    mc = _mc_posterior(comps, x, t, 1 - t, "velocity", seed=2)
    assert rf_gmm2d_velocity(comps, x, t) == pytest.approx(mc, abs=1e-2)


@pytest.mark.parametrize("x,tau", [((0.3, -0.1), 0.3), ((1.0, 0.5), 0.1), ((-0.5, 0.8), 0.6)])
def test_gmm_xbar_monte_carlo(x, tau):
    comps = problems.GMM2D
    a, s = vp_alpha_sigma(DIT_SCHEDULE, tau)
    x = np.array(x)
    mc = _mc_posterior(comps, x, a, s, "xbar", seed=3)
    out = GaussianMixtureField(comps, DIT_SCHEDULE)(x, tau)
    assert out == pytest.approx(mc, abs=1e-2)


def test_single_component_mixture_is_gaussian():
    comps = MixtureComponents([1.0], [[0.4, -1.0]], [0.6])
    x = np.array([0.2, 0.9])
    assert rf_gmm2d_velocity(comps, x, 0.3) == pytest.approx(
        rf_gaussian_velocity([0.4, -1.0], 0.6, x, 0.3), rel=1e-13)


def test_symmetric_mixture_zero_at_origin():
    comps = MixtureComponents([0.5, 0.5], [[1.3, 0.0], [-1.3, 0.0]], [0.4, 0.4])
    assert rf_gmm2d_velocity(comps, np.zeros(2), 0.6)[0] == pytest.approx(0.0, abs=1e-15)


def test_gmm_far_away_is_finite():
    fld = problems.make_field("gmm2d")
    out = fld(np.array([[1e4, -3e4], [0.0, 5e3]]), 0.999)
    assert np.all(np.isfinite(out))


def test_vp_xbar_cases():
    assert vp_gaussian_xbar([0.5], 0.0, DIT_SCHEDULE, [3.0], 0.4) == pytest.approx([0.5])
    assert vp_gaussian_xbar([0.5], 1.3, DIT_SCHEDULE, [3.0], 0.0) == pytest.approx([3.0])
    # s = 1, mu = 0: x-bar = alpha x with alpha(0.5) from the decimal evaluation
    assert vp_gaussian_xbar([0.0], 1.0, DIT_SCHEDULE, [1.0], 0.5) == pytest.approx(
        [0.28118288079675237585], rel=1e-13)


@pytest.mark.parametrize("w", [[0.5, 0.6], [-0.1, 1.1], [0.3, 0.3]])
def test_mixture_weights_validated(w):
    with pytest.raises(DomainError):
        MixtureComponents(w, [[0, 0], [1, 1]], [1, 1])


# --- derivatives --------------------------------------------------------------


def _fields():
    return [
        problems.make_field("gmm2d", "rf"),
        problems.make_field("gmm2d", "vp"),
        problems.make_field("gaussian", "vp"),
        PerturbedField(problems.make_field("gmm2d"), 0.1, seed=4),
        SineLinearField(np.array([[0.2, -1.0], [0.7, 0.1]]), 1.5),
        TimePowerField(3.0, dim=2),
        LinearField(np.array([[1.0, 2.0], [0.0, -1.0]])),
    ]


@pytest.mark.parametrize("fld", _fields(), ids=lambda f: f"{f.kind}-{f.scheduler.value}")
def test_vjp_matches_finite_differences(fld):
    gen = np.random.default_rng(5)
    x = gen.standard_normal((3, 2))
    g = gen.standard_normal((3, 2))
    t, h = 0.37, 1e-6
    gx, gt = fld.vjp(x, t, g)
    for b in range(3):
        for k in range(2):
            xp, xm = x.copy(), x.copy()
            xp[b, k] += h
            xm[b, k] -= h
            fd = np.sum(g * (fld(xp, t) - fld(xm, t))) / (2 * h)
            assert gx[b, k] == pytest.approx(fd, rel=1e-6, abs=1e-8)
    fd_t = np.sum(g * (fld(x, t + h) - fld(x, t - h))) / (2 * h)
    assert gt == pytest.approx(fd_t, rel=1e-6, abs=1e-8)


# --- perturbed field ----------------------------------------------------------


@pytest.mark.parametrize("eta", [0.0, 0.01, 0.05, 1.0])
def test_perturbation_l1_bound(eta):
    base = problems.make_field("gmm2d")
    fld = PerturbedField(base, eta, seed=11)
    gen = np.random.default_rng(6)
    x = 3 * gen.standard_normal((10_000, 2))
    worst = 0.0
    for t in np.linspace(0, 0.99, 10):
        gap = np.sum(np.abs(fld(x, t) - base(x, t)), axis=1)
        worst = max(worst, gap.max())
    assert worst <= eta
    if eta:
        assert worst > 0.5 * eta  # not vacuous


def test_perturbation_seeded():
    base = problems.make_field("gaussian")
    x = np.ones((2, 2))
    a = PerturbedField(base, 0.1, seed=1).perturbation(x, 0.3)
    assert np.array_equal(a, PerturbedField(base, 0.1, seed=1).perturbation(x, 0.3))
    assert not np.array_equal(a, PerturbedField(base, 0.1, seed=2).perturbation(x, 0.3))


def test_negative_eta_rejected():
    with pytest.raises(DomainError):
        PerturbedField(problems.make_field("gaussian"), -0.1)


# --- oracle -------------------------------------------------------------------


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.integers(1, 3000))
def test_oracle_constant(c, steps):
    c = np.array(c)
    x0 = np.linspace(-1, 1, len(c))
    assert oracle_endpoint(ConstantField(c), "rf", x0, steps) == pytest.approx(x0 + c, abs=1e-12)


def test_oracle_linear_exponential():
    assert oracle_endpoint(LinearField(1.0), "rf", np.array([1.0]), 100_000)[0] == pytest.approx(
        math.e, abs=1e-4)


def test_oracle_gaussian_flow_map_rf():
    # exact flow of Gaussian data: x_1 = mu + s * x_0
    fld = problems.make_field("gaussian", "rf")
    x0 = np.random.default_rng(8).standard_normal((32, 2))
    exact = np.array(problems.GAUSSIAN_MEAN) + problems.GAUSSIAN_SCALE * x0
    assert oracle_endpoint(fld, "rf", x0, 20_000) == pytest.approx(exact, abs=1e-4)


def test_oracle_gaussian_flow_map_vp():
    # exact flow: (x - alpha mu) / sqrt(alpha^2 s^2 + sigma^2) is conserved
    fld = problems.make_field("gaussian", "vp")
    mu, s = np.array(problems.GAUSSIAN_MEAN), problems.GAUSSIAN_SCALE
    a0, s0 = vp_alpha_sigma(DIT_SCHEDULE, 1.0)
    a1, s1 = vp_alpha_sigma(DIT_SCHEDULE, 1e-4)
    x0 = np.random.default_rng(8).standard_normal((32, 2))
    z = (x0 - a0 * mu) / math.sqrt(a0 * a0 * s * s + s0 * s0)
    exact = a1 * mu + math.sqrt(a1 * a1 * s * s + s1 * s1) * z
    assert oracle_endpoint(fld, "vp", x0, 100_000) == pytest.approx(exact, abs=1e-4)


# 10^5-step oracle on draw_noise(0, (4, 2), "golden"); an independent 4000-step
# RK4 integration agrees to 1e-5.
GMM_GOLDEN = [[-1.1111039277361836, 1.3327140722922513], [-1.2621112332000204, 1.3103830077323844],
              [1.4365833454313608, -0.03965377027746126], [1.0580251376755714, 0.3436427340925964]]


def test_oracle_gmm_golden():
    from solver_forge.rng import standard_normal

    x0 = standard_normal(0, (4, 2), "golden")
    out = oracle_endpoint(problems.make_field("gmm2d"), "rf", x0, 100_000)
    assert out == pytest.approx(np.array(GMM_GOLDEN), abs=1e-12)


@pytest.mark.parametrize("name,kind", [("gmm2d", "rf"), ("sine", "rf"), ("gaussian", "vp")])
def test_oracle_halving_monotone(name, kind):
    fld = problems.make_field(name, kind)
    x0 = np.random.default_rng(9).standard_normal((64, 2))
    ends = [oracle_endpoint(fld, kind, x0, n) for n in (250, 500, 1000, 2000, 4000)]
    gaps = [np.max(np.abs(a - b)) for a, b in zip(ends, ends[1:])]
    assert all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:]))


def test_oracle_rejects_zero_steps():
    with pytest.raises(DomainError):
        oracle_endpoint(LinearField(), "rf", np.ones(1), 0)


def test_trajectory_invariants():
    with pytest.raises(DomainError):
        Trajectory([0.0, 0.0], np.zeros((2, 1, 1)))
    with pytest.raises(DomainError):
        Trajectory([0.0, 1.0], np.zeros((3, 1, 1)))
    tr = Trajectory([0.0, 0.5, 1.0], np.array([[[0.0]], [[1.0]], [[3.0]]]))
    assert tr.at(0.75)[0, 0] == pytest.approx(2.0)
    assert tr.endpoint[0, 0] == 3.0
