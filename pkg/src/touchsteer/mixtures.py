"""1D Gaussian-mixture ground truth for validating the guidance math.

Under the linear path x_t = (1-t) x0 + t eps, a mixture with component
(mu_i, s_i) has marginal components ((1-t) mu_i, (1-t)^2 s_i^2 + t^2), all
in closed form. That gives three independent handles used by the tests:
the exact marginal velocity a_t x + b_t grad log p_t, the exact class
posterior for an oracle classifier, and direct forward simulation of the
path for Monte Carlo conditioning.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp as _lse
from scipy.stats import norm

from .schedulers import marginal_fm_coefficients


@dataclass(frozen=True)
class GaussianMixtureSpec:
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray
    labels: np.ndarray  # class label per component

    def __post_init__(self):
        for name in ("means", "stds", "weights", "labels"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name))))
        if not (self.stds > 0).all():
            raise ValueError("component stds must be positive")
        if not (self.weights > 0).all():
            raise ValueError("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        n = len(self.means)
        if not (len(self.stds) == len(self.weights) == len(self.labels) == n):
            raise ValueError("component arrays must have equal length")

    @property
    def n_components(self):
        return len(self.means)

    def classes(self):
        return np.unique(self.labels)

    def class_weight(self, y):
        return float(self.weights[self.labels == y].sum())

    def sample_x0(self, rng, n):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[comp] + self.stds[comp] * rng.standard_normal(n)

    def data_cdf(self, x):
        x = np.atleast_1d(x)
        return (self.weights[None, :] * norm.cdf((x[:, None] - self.means[None, :]) / self.stds[None, :])).sum(axis=1)

    @classmethod
    def random(cls, rng, n_components=3, mean_scale=2.0):
        means = rng.uniform(-mean_scale, mean_scale, size=n_components)
        stds = rng.uniform(0.2, 0.8, size=n_components)
        w = rng.uniform(0.5, 1.5, size=n_components)
        return cls(means, stds, w / w.sum(), np.arange(n_components))


def _log_weighted_gauss(x, means, variances, weights):
    # (n, C) log of w_i N(x; m_i, v_i)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = x[:, None] - means[None, :]
    return np.log(weights)[None, :] - 0.5 * np.log(2 * np.pi * variances)[None, :] - 0.5 * d * d / variances[None, :]


def _mixture_score(x, means, variances, weights):
    """grad_x log sum_i w_i N(x; m_i, v_i), vectorized over x."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    lw = _log_weighted_gauss(x, means, variances, weights)
    r = np.exp(lw - _lse(lw, axis=1, keepdims=True))
    return (r * (-(x[:, None] - means[None, :]) / variances[None, :])).sum(axis=1)


# ------------------------------------------------------------- flow marginals


def fm_marginal_params(spec, t):
    """Component means/variances of p_t under the linear path."""
    m = (1.0 - t) * spec.means
    v = (1.0 - t) ** 2 * spec.stds**2 + t**2
    return m, v


def fm_log_density(spec, x, t):
    m, v = fm_marginal_params(spec, t)
    return _lse(_log_weighted_gauss(x, m, v, spec.weights), axis=1)


def fm_score(spec, x, t):
    m, v = fm_marginal_params(spec, t)
    return _mixture_score(x, m, v, spec.weights)


def marginal_velocity_oracle(spec, x, t):
    """Closed-form marginal velocity u_t(x) = a_t x + b_t grad log p_t(x)."""
    a, b = marginal_fm_coefficients(t)  # validates t in (0, 1)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return a * x + b * fm_score(spec, x, t)


def fm_class_log_posterior_grad(spec, x, t, y):
    """grad_x log p(y | x_t): class-restricted score minus full score."""
    mask = spec.labels == y
    if not mask.any():
        raise ValueError(f"no component carries label {y}")
    m, v = fm_marginal_params(spec, t)
    wy = spec.weights[mask] / spec.weights[mask].sum()
    return _mixture_score(x, m[mask], v[mask], wy) - _mixture_score(x, m, v, spec.weights)


def fm_class_posterior(spec, x, t, y):
    m, v = fm_marginal_params(spec, t)
    lw = _log_weighted_gauss(x, m, v, spec.weights)
    total = _lse(lw, axis=1)
    mask = spec.labels == y
    return np.exp(_lse(lw[:, mask], axis=1) - total)


# ------------------------------------------------------------- ddpm marginals


def ddpm_marginal_params(spec, level, schedule):
    ab = schedule.alpha_bars[level]
    m = np.sqrt(ab) * spec.means
    v = ab * spec.stds**2 + (1.0 - ab)
    return m, v, ab


def ddpm_optimal_epsilon(spec, x, level, schedule):
    """Posterior-mean noise predictor E[eps | x_k] for the mixture."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    m, v, ab = ddpm_marginal_params(spec, level, schedule)
    lw = _log_weighted_gauss(x, m, v, spec.weights)
    r = np.exp(lw - _lse(lw, axis=1, keepdims=True))
    # per-component posterior mean of x0 given x_k
    shrink = np.sqrt(ab) * spec.stds**2 / v
    x0_hat = (r * (spec.means[None, :] + shrink[None, :] * (x[:, None] - m[None, :]))).sum(axis=1)
    return (x - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def ddpm_class_log_posterior_grad(spec, x, level, schedule, y):
    mask = spec.labels == y
    if not mask.any():
        raise ValueError(f"no component carries label {y}")
    m, v, _ = ddpm_marginal_params(spec, level, schedule)
    wy = spec.weights[mask] / spec.weights[mask].sum()
    return _mixture_score(x, m[mask], v[mask], wy) - _mixture_score(x, m, v, spec.weights)


# --------------------------------------------------------- Monte Carlo probes


def mc_conditional_velocity(spec, x, t, n_samples, rng, bandwidth=None):
    """Kernel-conditioned estimate of E[eps - x0 | x_t = x] from raw paths.

    Simulates n paths forward (no density formulas involved), then
    conditions empirically with a Gaussian kernel around x. Returns
    (estimate, standard_error) arrays over the query points.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x0 = spec.sample_x0(rng, n_samples)
    eps = rng.standard_normal(n_samples)
    xt = (1.0 - t) * x0 + t * eps
    g = eps - x0
    if bandwidth is None:
        bandwidth = 0.5 * xt.std() * n_samples ** (-1.0 / 5.0)
    est = np.empty_like(x)
    se = np.empty_like(x)
    for j, xq in enumerate(x):
        w = np.exp(-0.5 * ((xt - xq) / bandwidth) ** 2)
        wsum = w.sum()
        if wsum <= 0:
            raise FloatingPointError(f"no path mass near x={xq} at t={t}")
        mean = (w * g).sum() / wsum
        var = (w * w * (g - mean) ** 2).sum() / wsum**2
        est[j] = mean
        se[j] = np.sqrt(var)
    return est, se


def data_class_posterior(spec, x, y):
    """p(y | x0) under the data mixture."""
    lw = _log_weighted_gauss(x, spec.means, spec.stds**2, spec.weights)
    total = _lse(lw, axis=1)
    mask = spec.labels == y
    return np.exp(_lse(lw[:, mask], axis=1) - total)


def classify(spec, x):
    """Most probable class label per sample under the data mixture."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    classes = spec.classes()
    post = np.stack([data_class_posterior(spec, x, y) for y in classes])
    return classes[np.argmax(post, axis=0)]


def class_conditional_cdf(spec, y):
    mask = spec.labels == y
    w = spec.weights[mask] / spec.weights[mask].sum()
    means, stds = spec.means[mask], spec.stds[mask]

    def cdf(x):
        x = np.atleast_1d(x)
        return (w[None, :] * norm.cdf((x[:, None] - means[None, :]) / stds[None, :])).sum(axis=1)

    return cdf


def transport_samples(spec, n_samples, steps, rng):
    """Integrate the oracle velocity from t=1 to 0 starting at N(0, 1)."""
    x = rng.standard_normal(n_samples)
    dt = 1.0 / steps
    for i in range(steps, 0, -1):
        t = i / steps
        if i == steps:
            t -= 1e-9  # oracle is defined on the open interval
        x = x - dt * marginal_velocity_oracle(spec, x, t)
    return x


def ks_distance(samples, cdf):
    """Kolmogorov-Smirnov sup distance between samples and an analytic CDF."""
    s = np.sort(np.asarray(samples))
    n = len(s)
    c = cdf(s)
    upper = np.abs(np.arange(1, n + 1) / n - c).max()
    lower = np.abs(np.arange(0, n) / n - c).max()
    return max(upper, lower)
