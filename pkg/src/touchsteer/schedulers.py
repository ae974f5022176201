"""Noise and interpolation machinery for both sampler families.

Covers the DDPM forward/reverse arithmetic (squared-cosine default), the
linear flow-matching path x_t = (1-t) x0 + t eps sampled from t=1 down to 0,
the per-family guidance coefficients, and the truncated-geometric noise
level sampler used to corrupt actions during feasibility-model training.

Step-index conventions: schedule arrays (betas, alpha_bars) are 0-based of
length K. `ddpm_add_noise` takes the 0-based noise level. `ddpm_step` takes
the 1-based step k in [1, K] of the sampling loop `for k = K..1`, where the
incoming sample sits at level k-1; the final step (k=1) adds no noise.
"""

import math
from dataclasses import dataclass

import numpy as np


def squaredcos_betas(num_steps, max_beta=0.999):
    """Squared-cosine beta schedule (discretized alpha-bar curve)."""

    def alpha_bar(u):
        return math.cos((u + 0.008) / 1.008 * math.pi / 2.0) ** 2

    betas = []
    for i in range(num_steps):
        a0 = alpha_bar(i / num_steps)
        a1 = alpha_bar((i + 1) / num_steps)
        betas.append(min(1.0 - a1 / a0, max_beta))
    return np.array(betas)


def linear_betas(num_steps, start=1e-4, end=0.02):
    return np.linspace(start, end, num_steps)


_BETA_SCHEDULES = {"squaredcos": squaredcos_betas, "linear": linear_betas}


@dataclass(frozen=True)
class DdpmSchedule:
    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def make(cls, num_steps=100, kind="squaredcos"):
        if num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {num_steps}")
        try:
            betas = _BETA_SCHEDULES[kind](num_steps)
        except KeyError:
            raise ValueError(f"unknown beta schedule {kind!r}") from None
        if not ((betas > 0).all() and (betas < 1).all()):
            raise ValueError("betas must lie in (0, 1)")
        alpha_bars = np.cumprod(1.0 - betas)
        return cls(num_steps, betas, alpha_bars)

    @classmethod
    def from_betas(cls, betas):
        betas = np.asarray(betas, dtype=np.float64)
        return cls(len(betas), betas, np.cumprod(1.0 - betas))


@dataclass(frozen=True)
class FmPath:
    """Linear (optimal-transport) path: alpha_t = 1-t, sigma_t = t."""

    num_steps: int = 10

    def times(self):
        """Sampling grid t = 1, (N-1)/N, ..., 1/N; each step adds dt = -1/N."""
        n = self.num_steps
        return np.arange(n, 0, -1) / n

    @property
    def dt(self):
        return -1.0 / self.num_steps


def ddpm_add_noise(x0, eps, k, schedule):
    """Forward noising to level k: sqrt(abar_k) x0 + sqrt(1-abar_k) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"ddpm_add_noise: shape mismatch {x0.shape} vs {eps.shape}")
    if not 0 <= k < schedule.num_steps:
        raise ValueError(f"ddpm_add_noise: level {k} outside [0, {schedule.num_steps})")
    ab = schedule.alpha_bars[k]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_posterior(x, eps_pred, k, schedule):
    """Posterior mean and noise scale of the ancestral step k -> k-1.

    Mean per the standard epsilon parameterization; standard deviation
    sqrt((1-abar_{k-1})/(1-abar_k) * beta_k), zero at the final step (k=1).
    """
    if not 1 <= k <= schedule.num_steps:
        raise ValueError(f"ddpm_step: step {k} outside [1, {schedule.num_steps}]")
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if not np.isfinite(eps_pred).all():
        raise FloatingPointError("ddpm_step: non-finite noise prediction")
    i = k - 1
    beta = schedule.betas[i]
    ab = schedule.alpha_bars[i]
    ab_prev = schedule.alpha_bars[i - 1] if i >= 1 else 1.0
    mean = (x - beta / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(1.0 - beta)
    std = 0.0 if k == 1 else float(np.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta))
    return mean, std


def ddpm_step(x, eps_pred, k, schedule, rng):
    """One ancestral step from 1-based step k down to k-1."""
    mean, std = ddpm_posterior(x, eps_pred, k, schedule)
    if std == 0.0:
        return mean
    return mean + std * rng.standard_normal(np.shape(x))


def fm_interpolate(x0, eps, t):
    """Point on the linear path: (1-t) x0 + t eps."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"fm_interpolate: t={t} outside [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"fm_interpolate: shape mismatch {x0.shape} vs {eps.shape}")
    return (1.0 - t) * x0 + t * eps


def fm_conditional_velocity(x0, eps):
    """Time derivative of the linear path (t increasing toward noise)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"fm_conditional_velocity: shape mismatch {x0.shape} vs {eps.shape}")
    return eps - x0


def guidance_coefficient(family, k_or_t, schedule=None):
    """Per-family multiplier on the score gradient.

    diffusion: sqrt(1 - abar_k) at 0-based level k; flow: t/(1-t) for t in
    [0, 1). The flow coefficient is singular at t=1 and is never requested
    there because the guidance window keeps t strictly below 1.
    """
    if family == "diffusion":
        k = int(k_or_t)
        if schedule is None:
            raise ValueError("guidance_coefficient: diffusion needs a schedule")
        if not 0 <= k < schedule.num_steps:
            raise ValueError(f"guidance_coefficient: level {k} outside [0, {schedule.num_steps})")
        return float(np.sqrt(1.0 - schedule.alpha_bars[k]))
    if family == "flow":
        t = float(k_or_t)
        if not 0.0 <= t < 1.0:
            raise ValueError(f"guidance_coefficient: t={t} outside [0, 1)")
        return t / (1.0 - t)
    raise ValueError(f"guidance_coefficient: unknown family {family!r}")


def marginal_fm_coefficients(t):
    """(a_t, b_t) of the marginal-velocity identity u = a_t x + b_t grad log p.

    For the linear path: a_t = alpha'/alpha = -1/(1-t) and
    b_t = (alpha'/alpha - sigma'/sigma) sigma^2 = -t/(1-t).
    """
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ValueError(f"marginal_fm_coefficients: t={t} outside (0, 1)")
    a = -1.0 / (1.0 - t)
    b = -t / (1.0 - t)
    return a, b


@dataclass(frozen=True)
class GeometricNoiseSampler:
    """Truncated geometric distribution over noise levels, P(k) ~ p(1-p)^k."""

    p: float = 0.1
    k_max: int | None = None

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"geometric p={self.p} outside (0, 1)")
        if self.k_max is not None and self.k_max < 0:
            raise ValueError(f"k_max={self.k_max} must be >= 0")

    def pmf(self):
        if self.k_max is None:
            raise ValueError("pmf of the untruncated sampler is infinite")
        k = np.arange(self.k_max + 1)
        w = self.p * (1.0 - self.p) ** k
        return w / w.sum()

    def sample(self, rng, size=None):
        if self.k_max is None:
            return rng.geometric(self.p, size=size) - 1
        cdf = np.cumsum(self.pmf())
        u = rng.random(size=size)
        return np.searchsorted(cdf, u, side="right")


def sample_geometric_level(sampler, rng, size=None):
    return sampler.sample(rng, size=size)
