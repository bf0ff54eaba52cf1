"""Analytic velocity / x-bar fields and the brute-force oracle integrator.

A field maps a batch of states ``x`` (shape ``(B, d)``) and a scalar model time
to the model output: the velocity for rectified flow, or the clean-data
prediction ``x_bar`` for VP.  RF fields take the RF time (0 = noise), VP fields
take the internal VP time ``tau`` (0 = data).

Every field also provides :meth:`VelocityField.vjp`, the closed-form
vector-Jacobian product with respect to ``x`` and ``t``; the search module uses
it to differentiate through unrolled samplers.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import rng
from .errors import DivergenceError, DomainError, SingularityError
from .schedules import (
    NoiseSchedule,
    SchedulerKind,
    sampling_to_vp_time,
    vp_alpha_sigma,
    vp_beta,
)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise DomainError(f"state must be 1-D or 2-D, got shape {x.shape}")
    return x, False


class VelocityField:
    """Base class.  Subclasses implement ``_eval`` and ``_vjp`` on batches."""

    kind = "abstract"
    scheduler = SchedulerKind.RECTIFIED_FLOW
    dim: int

    @property
    def noise(self) -> NoiseSchedule:
        return NoiseSchedule.rectified_flow()

    def __call__(self, x, t):
        xb, squeeze = _as_batch(x)
        out = self._eval(xb, float(t))
        return out[0] if squeeze else out

    def vjp(self, x, t, g):
        """Return ``(g^T dv/dx, sum of g^T dv/dt)`` for cotangent ``g``."""
        xb, squeeze = _as_batch(x)
        gb, _ = _as_batch(g)
        gx, gt = self._vjp(xb, float(t), gb)
        return (gx[0] if squeeze else gx), float(gt)

    def _eval(self, x, t):
        raise NotImplementedError

    def _vjp(self, x, t, g):
        raise NotImplementedError


class ConstantField(VelocityField):
    kind = "constant"

    def __init__(self, value, scheduler: SchedulerKind | str = SchedulerKind.RECTIFIED_FLOW,
                 noise: NoiseSchedule | None = None):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.dim = self.value.size
        self.scheduler = SchedulerKind.parse(scheduler)
        if self.scheduler is SchedulerKind.VP_LINEAR and noise is None:
            noise = NoiseSchedule.vp_linear()
        self._noise = noise

    @property
    def noise(self):
        return self._noise or NoiseSchedule.rectified_flow()

    def _eval(self, x, t):
        return np.broadcast_to(self.value, x.shape).copy()

    def _vjp(self, x, t, g):
        return np.zeros_like(x), 0.0


class LinearField(VelocityField):
    """``v(x, t) = A x``.  A scalar ``A`` acts elementwise on states of any dimension."""

    kind = "linear"

    def __init__(self, matrix=1.0):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.ndim not in (0, 2):
            raise DomainError("matrix must be a scalar or a square 2-D array")
        self.dim = self.matrix.shape[0] if self.matrix.ndim == 2 else None

    def _apply(self, x):
        return self.matrix * x if self.matrix.ndim == 0 else x @ self.matrix.T

    def _apply_t(self, g):
        return self.matrix * g if self.matrix.ndim == 0 else g @ self.matrix

    def _eval(self, x, t):
        return self._apply(x)

    def _vjp(self, x, t, g):
        return self._apply_t(g), 0.0


class SineLinearField(LinearField):
    """``v(x, t) = sin(2 pi f t) A x``.

    The exact flow map over ``[0, t]`` is ``expm((1 - cos 2 pi f t) / (2 pi f) A)``,
    so for integer ``f`` the endpoint at ``t = 1`` equals the start point.
    """

    kind = "sine"

    def __init__(self, matrix=1.0, frequency: float = 1.0):
        super().__init__(matrix)
        self.frequency = float(frequency)

    def _eval(self, x, t):
        return np.sin(2 * np.pi * self.frequency * t) * self._apply(x)

    def _vjp(self, x, t, g):
        w = 2 * np.pi * self.frequency
        gt = np.sum(g * self._apply(x)) * w * np.cos(w * t)
        return np.sin(w * t) * self._apply_t(g), float(gt)


class TimePowerField(VelocityField):
    """``v(x, t) = t^p`` in every coordinate, independent of ``x``."""

    kind = "time_power"

    def __init__(self, power: float = 2.0, dim: int = 1):
        self.power = float(power)
        self.dim = int(dim)

    def _eval(self, x, t):
        return np.full(x.shape, t ** self.power)

    def _vjp(self, x, t, g):
        dt = self.power * t ** (self.power - 1) if self.power != 0 else 0.0
        return np.zeros_like(x), float(np.sum(g) * dt)


@dataclass(frozen=True)
class MixtureComponents:
    """Isotropic Gaussian mixture ``sum_k w_k N(mu_k, s_k^2 I)``."""

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.atleast_1d(np.asarray(self.scales, dtype=float))
        if not (len(w) == len(mu) == len(s)):
            raise DomainError("weights, means and scales must have the same length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be positive and sum to 1")
        if np.any(s < 0):
            raise DomainError("mixture scales must be non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "scales", s)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        idx = gen.choice(len(self.weights), size=n, p=self.weights)
        return self.means[idx] + self.scales[idx, None] * gen.standard_normal((n, self.dim))


class GaussianMixtureField(VelocityField):
    """Exact model output for Gaussian-mixture data.

    With ``x_t = a(t) x_data + b(t) noise`` the rectified-flow output is
    ``E[x_data - noise | x_t]`` (``a = t``, ``b = 1 - t``) and the VP output is
    ``E[x_data | x_t]`` (``a = alpha(tau)``, ``b = sigma(tau)``).  Posterior
    component weights are computed in log space.
    """

    kind = "gmm"

    def __init__(self, components: MixtureComponents, noise: NoiseSchedule | None = None):
        self.components = components
        self._noise = noise or NoiseSchedule.rectified_flow()
        self.scheduler = self._noise.kind
        self.dim = components.dim

    @property
    def noise(self):
        return self._noise

    def _coeffs(self, t):
        """``(a, b, da/dt, db/dt)`` of the forward interpolant."""
        if self.scheduler is SchedulerKind.RECTIFIED_FLOW:
            if not 0.0 <= t <= 1.0:
                raise DomainError(f"RF time must lie in [0, 1], got {t}")
            return t, 1.0 - t, 1.0, -1.0
        alpha, sigma = vp_alpha_sigma(self._noise, t)
        beta = vp_beta(self._noise, t)
        dalpha = -0.5 * beta * alpha
        dsigma = 0.5 * beta * alpha * alpha / sigma if sigma > 0 else np.inf
        return alpha, sigma, dalpha, dsigma

    def _parts(self, x, t):
        a, b, da, db = self._coeffs(t)
        comp = self.components
        s2 = comp.scales ** 2
        var = a * a * s2 + b * b
        if np.any(var <= 0.0):
            raise SingularityError(f"degenerate marginal variance at t={t}")
        rf = self.scheduler is SchedulerKind.RECTIFIED_FLOW
        num = a * s2 - (b if rf else 0.0)
        kappa = num / var
        diff = x[:, None, :] - a * comp.means[None, :, :]
        sq = np.square(diff).sum(axis=2)
        d = x.shape[1]
        logp = np.log(comp.weights) - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * sq / var
        post = np.exp(logp - logp.max(axis=1, keepdims=True))
        post /= post.sum(axis=1, keepdims=True)
        cond = comp.means[None] + kappa[None, :, None] * diff
        return dict(a=a, b=b, da=da, db=db, s2=s2, var=var, num=num, kappa=kappa,
                    diff=diff, sq=sq, post=post, cond=cond, rf=rf)

    def _eval(self, x, t):
        # same quantities as _parts, without (B, K, d) temporaries
        a, b, _, _ = self._coeffs(t)
        comp = self.components
        s2 = comp.scales ** 2
        var = a * a * s2 + b * b
        if np.any(var <= 0.0):
            raise SingularityError(f"degenerate marginal variance at t={t}")
        kappa = (a * s2 - (b if self.scheduler is SchedulerKind.RECTIFIED_FLOW else 0.0)) / var
        mu = comp.means
        sq = (
            np.einsum("bd,bd->b", x, x)[:, None]
            - 2.0 * a * (x @ mu.T)
            + (a * a) * np.einsum("kd,kd->k", mu, mu)
        )
        logp = self._log_norm(var, x.shape[1]) - 0.5 * sq / var
        post = np.exp(logp - logp.max(axis=1, keepdims=True))
        post /= post.sum(axis=1, keepdims=True)
        pk = post * kappa
        return post @ mu + pk.sum(axis=1, keepdims=True) * x - a * (pk @ mu)

    def _log_norm(self, var, d):
        return np.log(self.components.weights) - 0.5 * d * np.log(2 * np.pi * var)

    def _vjp(self, x, t, g):
        p = self._parts(x, t)
        post, cond, diff, var, kappa = p["post"], p["cond"], p["diff"], p["var"], p["kappa"]
        out = np.einsum("bk,bkd->bd", post, cond)
        # g . (m_k - v): how much moving posterior mass onto component k changes g . v
        shift = np.einsum("bd,bkd->bk", g, cond) - np.einsum("bd,bd->b", g, out)[:, None]
        grad_logp_x = -diff / var[None, :, None]
        gx = np.einsum("bk,k,bd->bd", post, kappa, g) + np.einsum(
            "bk,bkd->bd", post * shift, grad_logp_x
        )

        a, da, db, b, s2, num = p["a"], p["da"], p["db"], p["b"], p["s2"], p["num"]
        dvar = 2 * a * da * s2 + 2 * b * db
        dnum = da * s2 - (db if p["rf"] else 0.0)
        dkappa = (dnum * var - num * dvar) / var ** 2
        mu = self.components.means
        # d m_k / dt = kappa_k' diff_k - kappa_k a' mu_k
        dcond = dkappa[None, :, None] * diff - (kappa * da)[None, :, None] * mu[None]
        d = x.shape[1]
        dlogp = (
            -0.5 * d * dvar / var
            + np.einsum("bkd,kd->bk", diff, da * mu) / var
            + 0.5 * p["sq"] * dvar / var ** 2
        )
        gt = np.einsum("bk,bd,bkd->", post, g, dcond) + np.sum(post * shift * dlogp)
        return gx, float(gt)


class GaussianField(GaussianMixtureField):
    """Single isotropic Gaussian ``N(mu, s^2 I)``."""

    kind = "gaussian"

    def __init__(self, mean, scale: float, noise: NoiseSchedule | None = None):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        super().__init__(MixtureComponents([1.0], mean[None, :], [float(scale)]), noise)
        self.mean = mean
        self.scale = float(scale)


class PerturbedField(VelocityField):
    """``base + (eta / d) * tanh(h(x, t))`` with a seeded smooth ``h``.

    Each output coordinate of ``h`` is a sum of ``n_terms`` random sinusoids of
    ``(x, t)``.  Since ``|tanh| < 1`` the L1 distance to the base output is
    below ``eta`` everywhere.
    """

    kind = "perturbed"

    def __init__(self, base: VelocityField, eta: float, seed: int = 0, n_terms: int = 4):
        if eta < 0:
            raise DomainError(f"eta must be non-negative, got {eta}")
        self.base = base
        self.eta = float(eta)
        self.seed = int(seed)
        self.dim = base.dim
        self.scheduler = base.scheduler
        gen = rng.stream(seed, "perturbation")
        d = base.dim
        self._amp = gen.uniform(0.5, 1.5, size=(n_terms, d))
        self._wx = gen.normal(0.0, 2.0, size=(n_terms, d, d))
        self._wt = gen.normal(0.0, 6.0, size=(n_terms, d))
        self._phase = gen.uniform(0.0, 2 * np.pi, size=(n_terms, d))

    @property
    def noise(self):
        return self.base.noise

    def _h(self, x, t):
        arg = np.einsum("mcd,bd->bmc", self._wx, x) + self._wt * t + self._phase
        return arg

    def perturbation(self, x, t):
        xb, squeeze = _as_batch(x)
        arg = self._h(xb, float(t))
        h = np.sum(self._amp * np.sin(arg), axis=1)
        out = (self.eta / self.dim) * np.tanh(h)
        return out[0] if squeeze else out

    def _eval(self, x, t):
        return self.base._eval(x, t) + self.perturbation(x, t)

    def _vjp(self, x, t, g):
        gx, gt = self.base._vjp(x, t, g)
        arg = self._h(x, t)
        h = np.sum(self._amp * np.sin(arg), axis=1)
        dtanh = (self.eta / self.dim) * (1.0 - np.tanh(h) ** 2)
        gh = g * dtanh  # (B, c)
        coef = gh[:, None, :] * self._amp * np.cos(arg)  # (B, m, c)
        gx = gx + np.einsum("bmc,mcd->bd", coef, self._wx)
        gt = gt + float(np.sum(coef * self._wt))
        return gx, gt


def rf_gaussian_velocity(mu, s: float, x, t: float):
    """``E[x_data - noise | x_t]`` for ``x_data ~ N(mu, s^2 I)`` under RF."""
    mu = np.asarray(mu, dtype=float)
    x = np.asarray(x, dtype=float)
    var = t * t * s * s + (1.0 - t) ** 2
    if var == 0.0:
        raise SingularityError("delta data at t = 1 has no velocity")
    return mu + (t * s * s - (1.0 - t)) * (x - t * mu) / var


def rf_gmm2d_velocity(components: MixtureComponents, x, t: float):
    return GaussianMixtureField(components)(x, t)


def vp_gaussian_xbar(mu, s: float, sched: NoiseSchedule, x, t: float):
    """``E[x_data | x_t]`` for ``x_t = alpha x_data + sigma noise``, ``x_data ~ N(mu, s^2 I)``."""
    alpha, sigma = vp_alpha_sigma(sched, t)
    mu = np.asarray(mu, dtype=float)
    x = np.asarray(x, dtype=float)
    return mu + alpha * s * s * (x - alpha * mu) / (alpha * alpha * s * s + sigma * sigma)


def kahan_add(x, comp, inc):
    """One compensated-summation update ``x += inc``; returns ``(x, comp)``."""
    y = inc - comp
    t = x + y
    return t, (t - x) - y


def oracle_endpoint(field: VelocityField, noise: NoiseSchedule | SchedulerKind | str, x0,
                    steps: int = 100_000):
    """Brute-force endpoint on a uniform grid of ``steps`` steps.

    RF: explicit Euler on ``t`` in [0, 1].  VP: first-order exponential
    (DDIM-type) steps on the uniform sampling axis, i.e. from ``tau = 1`` to
    ``tau = t_min``.  The RF sum is compensated (Kahan).
    """
    if not isinstance(noise, NoiseSchedule):
        kind = SchedulerKind.parse(noise)
        noise = field.noise if kind is SchedulerKind.VP_LINEAR else NoiseSchedule.rectified_flow()
    if steps < 1:
        raise DomainError("steps must be >= 1")
    x, squeeze = _as_batch(x0)
    x = x.copy()
    grid = np.linspace(0.0, 1.0, steps + 1)
    if noise.is_vp:
        tau = sampling_to_vp_time(noise, grid)
        alpha, sigma = vp_alpha_sigma(noise, tau)
        for i in range(steps):
            xbar = field._eval(x, float(tau[i]))
            ratio = sigma[i + 1] / sigma[i]
            x = ratio * x + (alpha[i + 1] - ratio * alpha[i]) * xbar
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"oracle diverged at step {i}")
    else:
        comp = np.zeros_like(x)  # compensated summation keeps 1e5 steps at roundoff level
        for i in range(steps):
            x, comp = kahan_add(x, comp, (grid[i + 1] - grid[i]) * field._eval(x, float(grid[i])))
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"oracle diverged at step {i}")
    return x[0] if squeeze else x


@dataclass
class Trajectory:
    """States of one sampler run on the sampling axis.

    ``states`` has shape ``(len(times), B, d)``.  ``evals`` holds the model
    outputs used (one per evaluation point), ``nfe`` the number of model calls.
    """

    times: np.ndarray
    states: np.ndarray
    evals: list = dc_field(default_factory=list)
    nfe: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.times) != len(self.states):
            raise DomainError("times and states must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise DomainError("trajectory times must be strictly increasing")

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t) -> np.ndarray:
        """Linear interpolation of the states in time."""
        t = float(t)
        if t <= self.times[0]:
            return self.states[0]
        if t >= self.times[-1]:
            return self.states[-1]
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return self.states[k] + w * (self.states[k + 1] - self.states[k])
