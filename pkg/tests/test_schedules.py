import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from solver_forge.errors import DomainError, SingularityError
from solver_forge.schedules import (
    DDPM_RESPACE,
    DIT_SCHEDULE,
    REFLOW_RESPACE,
    NoiseSchedule,
    SchedulerKind,
    respace,
    respace_grid,
    sampling_to_vp_time,
    vp_alpha_sigma,
    vp_beta_integral,
    vp_lambda,
    vp_omega,
    vp_time_from_lambda,
    vp_time_to_sampling,
)


@pytest.mark.parametrize("text,kind", [
    ("rf", SchedulerKind.RECTIFIED_FLOW),
    ("rectified_flow", SchedulerKind.RECTIFIED_FLOW),
    ("vp", SchedulerKind.VP_LINEAR),
    ("vp_linear", SchedulerKind.VP_LINEAR),
])
def test_parse_kind(text, kind):
    assert SchedulerKind.parse(text) is kind


def test_parse_kind_rejects_unknown():
    with pytest.raises(ValueError):
        SchedulerKind.parse("cosine")


def test_alpha_sigma_endpoints():
    assert vp_alpha_sigma(DIT_SCHEDULE, 0.0) == (1.0, 0.0)
    a, s = vp_alpha_sigma(DIT_SCHEDULE, 1.0)
    # integral of beta over [0, 1] is (0.1 + 20) / 2
    assert a == pytest.approx(math.exp(-10.05 / 2), rel=1e-15)


def test_alpha_sigma_half():
    # 40-digit decimal evaluation of the closed form at tau = 0.5
    a, s = vp_alpha_sigma(DIT_SCHEDULE, 0.5)
    assert a == pytest.approx(0.28118288079675237585, rel=1e-14)
    assert s == pytest.approx(0.95965420206803624666, rel=1e-14)


@given(st.floats(0.0, 1.0))
def test_variance_preserving(t):
    a, s = vp_alpha_sigma(DIT_SCHEDULE, t)
    assert a * a + s * s == pytest.approx(1.0, abs=1e-15)


def test_beta_integral_matches_quadrature():
    t = np.linspace(0, 0.7, 70001)
    beta = 0.1 + 19.9 * t
    trap = np.sum((beta[1:] + beta[:-1]) / 2 * np.diff(t))
    assert vp_beta_integral(DIT_SCHEDULE, 0.7) == pytest.approx(trap, rel=1e-12)


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_alpha_sigma_domain(t):
    with pytest.raises(DomainError):
        vp_alpha_sigma(DIT_SCHEDULE, t)


def test_omega_singular_at_clean_end():
    with pytest.raises(SingularityError):
        vp_omega(DIT_SCHEDULE, 0.0)


def test_requires_vp():
    with pytest.raises(DomainError):
        vp_alpha_sigma(NoiseSchedule.rectified_flow(), 0.5)


def test_sampling_axis_orientation():
    tau = sampling_to_vp_time(DIT_SCHEDULE, np.array([0.0, 1.0]))
    assert tau[0] == 1.0 and tau[1] == pytest.approx(1e-4)
    assert vp_time_to_sampling(DIT_SCHEDULE, tau) == pytest.approx([0.0, 1.0])


@given(st.floats(1e-4, 1.0))
def test_lambda_inverse(tau):
    lam = vp_lambda(DIT_SCHEDULE, tau)
    assert vp_time_from_lambda(DIT_SCHEDULE, lam) == pytest.approx(tau, rel=1e-9, abs=1e-12)


def test_lambda_decreasing_in_tau():
    tau = np.linspace(1e-4, 1, 50)
    assert np.all(np.diff(vp_lambda(DIT_SCHEDULE, tau)) < 0)


@pytest.mark.parametrize("poly,at_one", [(REFLOW_RESPACE, 1.01), (DDPM_RESPACE, 0.996)])
def test_respace_endpoints(poly, at_one):
    assert respace(poly, 0.0) == 0.0
    assert respace(poly, 1.0) == pytest.approx(at_one, abs=1e-12)
    assert abs(respace(poly, 1.0) - 1.0) <= 0.02


def test_respace_ddpm_quarters():
    # exact rational evaluation of the quartic
    expected = [0.0, 0.3337734375, 0.515875, 0.7530234375, 0.996]
    assert respace_grid(DDPM_RESPACE, 4) == pytest.approx(expected, abs=1e-14)


def test_respace_reflow_single_step_clamps():
    assert respace_grid(REFLOW_RESPACE, 1).tolist() == [0.0, 1.0]


@pytest.mark.parametrize("poly", [REFLOW_RESPACE, DDPM_RESPACE])
@given(nfe=st.integers(1, 64))
def test_respace_grid_monotone(poly, nfe):
    g = respace_grid(poly, nfe)
    assert len(g) == nfe + 1 and g[0] == 0.0
    assert np.all(np.diff(g) >= 0) and np.all((g >= 0) & (g <= 1))


def test_respace_grid_rejects_zero():
    with pytest.raises(DomainError):
        respace_grid(REFLOW_RESPACE, 0)
