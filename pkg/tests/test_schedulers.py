import math

import numpy as np
import pytest

from touchsteer.schedulers import (
    DdpmSchedule,
    FmPath,
    GeometricNoiseSampler,
    ddpm_add_noise,
    ddpm_step,
    fm_conditional_velocity,
    fm_interpolate,
    guidance_coefficient,
    marginal_fm_coefficients,
    sample_geometric_level,
)


def test_default_schedule_invariants():
    sched = DdpmSchedule.make(100, "squaredcos")
    ab = sched.alpha_bars
    assert np.all(np.diff(ab) < 0), "alpha_bar must decrease strictly"
    assert ab[0] >= 0.99
    assert np.all((ab > 0) & (ab <= 1))
    lin = DdpmSchedule.make(50, "linear")
    assert np.all(np.diff(lin.alpha_bars) < 0)


def test_schedule_rejects_bad_args():
    with pytest.raises(ValueError):
        DdpmSchedule.make(0)
    with pytest.raises(ValueError):
        DdpmSchedule.make(10, "cubist")


def test_add_noise_zero_and_full_noise_limits():
    x0, eps = np.array([1.0, -2.0]), np.array([0.5, 0.5])
    clean = DdpmSchedule.from_betas([0.0, 0.5])  # abar_0 = 1: no noise yet
    assert np.array_equal(ddpm_add_noise(x0, eps, 0, clean), x0)
    saturated = DdpmSchedule.from_betas([1.0])  # abar_0 = 0: all noise
    assert np.array_equal(ddpm_add_noise(x0, eps, 0, saturated), eps)


def test_add_noise_matches_brute_force_cumprod():
    # recompute abar of the squared-cosine schedule from its definition
    K = 100

    def alpha_bar(u):
        return math.cos((u + 0.008) / 1.008 * math.pi / 2.0) ** 2

    abar = 1.0
    for i in range(K):
        beta = min(1.0 - alpha_bar((i + 1) / K) / alpha_bar(i / K), 0.999)
        abar *= 1.0 - beta

    sched = DdpmSchedule.make(K, "squaredcos")
    out = ddpm_add_noise(np.zeros(3), np.ones(3), K - 1, sched)
    np.testing.assert_allclose(out, np.full(3, np.sqrt(1.0 - abar)), rtol=1e-12)


def test_add_noise_validates():
    sched = DdpmSchedule.make(10)
    with pytest.raises(ValueError, match="level"):
        ddpm_add_noise(np.zeros(2), np.zeros(2), 10, sched)
    with pytest.raises(ValueError, match="shape"):
        ddpm_add_noise(np.zeros(2), np.zeros(3), 0, sched)


def test_ddpm_step_one_step_schedule_inverts_exactly():
    sched = DdpmSchedule.from_betas([0.3])
    rng = np.random.default_rng(0)
    x0, eps = np.array([0.4, -1.2]), np.array([0.9, 0.1])
    x1 = ddpm_add_noise(x0, eps, 0, sched)
    out = ddpm_step(x1, eps, 1, sched, rng)  # k=1: no posterior noise
    np.testing.assert_allclose(out, x0, rtol=1e-12)


def test_ddpm_step_deterministic_per_seed():
    sched = DdpmSchedule.make(20)
    x = np.linspace(-1, 1, 5)
    eps = np.ones(5) * 0.3

    def run():
        rng = np.random.default_rng(7)
        y = x.copy()
        for k in range(20, 0, -1):
            y = ddpm_step(y, eps, k, sched, rng)
        return y

    assert np.array_equal(run(), run())


def test_ddpm_step_rejects_bad_input():
    sched = DdpmSchedule.make(10)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        ddpm_step(np.zeros(2), np.zeros(2), 0, sched, rng)
    with pytest.raises(FloatingPointError):
        ddpm_step(np.zeros(2), np.array([np.nan, 0.0]), 5, sched, rng)


def test_full_chain_with_exact_gaussian_denoiser():
    # Exact posterior-mean denoiser for x0 ~ N(mu, s^2). The ancestral
    # variance is the point-mass one, so use a fine schedule to keep the
    # discretization bias below Monte Carlo resolution.
    K, mu, s, n = 1000, 0.7, 0.5, 10_000
    sched = DdpmSchedule.make(K, "squaredcos")
    rng = np.random.default_rng(123)
    x = rng.standard_normal(n)
    for k in range(K, 0, -1):
        ab = sched.alpha_bars[k - 1]
        post = mu + (np.sqrt(ab) * s * s / (ab * s * s + 1 - ab)) * (x - np.sqrt(ab) * mu)
        eps_star = (x - np.sqrt(ab) * post) / np.sqrt(1 - ab)
        x = ddpm_step(x, eps_star, k, sched, rng)
    assert abs(x.mean() - mu) < 3 * s / np.sqrt(n)
    assert abs(x.var() - s * s) < 3 * s * s * np.sqrt(2 / n)


def test_fm_interpolate_endpoints_and_midpoint():
    x0, eps = np.array([2.0]), np.array([0.0])
    assert np.array_equal(fm_interpolate(x0, eps, 0.0), x0)
    assert np.array_equal(fm_interpolate(x0, eps, 1.0), eps)
    assert np.array_equal(fm_interpolate(x0, eps, 0.5), np.array([1.0]))
    with pytest.raises(ValueError):
        fm_interpolate(x0, eps, 1.5)


def test_fm_interpolate_linear_in_each_argument():
    rng = np.random.default_rng(1)
    x0, x0b, eps = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
    t, zero = 0.37, np.zeros(4)
    # linear in x0 with eps fixed at zero, and vice versa
    np.testing.assert_allclose(
        fm_interpolate(2.0 * x0 + x0b, zero, t),
        2.0 * fm_interpolate(x0, zero, t) + fm_interpolate(x0b, zero, t),
        rtol=1e-12,
    )
    np.testing.assert_allclose(
        fm_interpolate(zero, 2.0 * x0 + x0b, t),
        2.0 * fm_interpolate(zero, x0, t) + fm_interpolate(zero, x0b, t),
        rtol=1e-12,
    )
    # jointly affine: convex combinations pass through
    lam = 0.3
    np.testing.assert_allclose(
        fm_interpolate(lam * x0 + (1 - lam) * x0b, eps, t),
        lam * fm_interpolate(x0, eps, t) + (1 - lam) * fm_interpolate(x0b, eps, t),
        rtol=1e-12,
    )


def test_fm_conditional_velocity():
    x0, eps = np.array([0.0]), np.array([1.0])
    assert np.array_equal(fm_conditional_velocity(x0, eps), np.array([1.0]))
    same = np.array([0.3, -0.7])
    assert np.array_equal(fm_conditional_velocity(same, same), np.zeros(2))
    # exact finite-difference consistency on the linear path
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=3), rng.normal(size=3)
    h, t = 1e-3, 0.4
    fd = (fm_interpolate(a, b, t + h) - fm_interpolate(a, b, t)) / h
    np.testing.assert_allclose(fd, fm_conditional_velocity(a, b), atol=1e-10)


def test_guidance_coefficient_flow():
    assert guidance_coefficient("flow", 0.5) == pytest.approx(1.0)
    assert guidance_coefficient("flow", 0.3) == pytest.approx(3.0 / 7.0)
    assert guidance_coefficient("flow", 0.0) == 0.0
    with pytest.raises(ValueError):
        guidance_coefficient("flow", 1.0)
    ts = np.linspace(0, 0.99, 50)
    vals = [guidance_coefficient("flow", t) for t in ts]
    assert np.all(np.diff(vals) > 0), "flow coefficient must increase on [0,1)"


def test_guidance_coefficient_diffusion():
    sched = DdpmSchedule.from_betas([1.0 - 0.9999])
    assert guidance_coefficient("diffusion", 0, sched) == pytest.approx(0.01, rel=1e-9)
    default = DdpmSchedule.make(100)
    # recompute from the schedule itself
    for k in (0, 7, 99):
        expected = np.sqrt(1.0 - np.cumprod(1.0 - default.betas)[k])
        assert guidance_coefficient("diffusion", k, default) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        guidance_coefficient("diffusion", 100, default)
    with pytest.raises(ValueError):
        guidance_coefficient("warp", 0.5)


def test_marginal_fm_coefficients():
    a, b = marginal_fm_coefficients(0.5)
    assert a == pytest.approx(-2.0) and b == pytest.approx(-1.0)
    for t in (0.0, 1.0):
        with pytest.raises(ValueError):
            marginal_fm_coefficients(t)
    # symbolic form (alpha'/alpha - sigma'/sigma) sigma^2 for alpha=1-t, sigma=t
    rng = np.random.default_rng(3)
    for t in rng.uniform(0.01, 0.99, size=100):
        alpha, sigma, dalpha, dsigma = 1.0 - t, t, -1.0, 1.0
        b_sym = (dalpha / alpha - dsigma / sigma) * sigma**2
        a_t, b_t = marginal_fm_coefficients(t)
        assert abs(b_t - b_sym) < 1e-12
        assert abs(a_t - dalpha / alpha) < 1e-12
        # flow-guidance coefficient identity: -b_t == t/(1-t)
        assert -b_t == pytest.approx(guidance_coefficient("flow", t), abs=1e-15)


def test_fm_path_grid():
    path = FmPath(10)
    ts = path.times()
    assert ts[0] == 1.0 and ts[-1] == pytest.approx(0.1)
    assert np.all(np.diff(ts) < 0)
    assert path.dt == pytest.approx(-0.1)


def test_geometric_degenerate_p_near_one():
    sampler = GeometricNoiseSampler(p=1.0 - 1e-12, k_max=50)
    rng = np.random.default_rng(0)
    assert np.all(sample_geometric_level(sampler, rng, size=1000) == 0)


def test_geometric_untruncated_mean():
    sampler = GeometricNoiseSampler(p=0.5, k_max=None)
    rng = np.random.default_rng(1)
    draws = sample_geometric_level(sampler, rng, size=100_000)
    assert abs(draws.mean() - 1.0) < 0.02  # mean (1-p)/p = 1


def test_geometric_truncated_pmf_tv_distance():
    sampler = GeometricNoiseSampler(p=0.1, k_max=20)
    rng = np.random.default_rng(2)
    draws = sample_geometric_level(sampler, rng, size=100_000)
    assert draws.min() >= 0 and draws.max() <= 20
    counts = np.bincount(draws, minlength=21) / len(draws)
    tv = 0.5 * np.abs(counts - sampler.pmf()).sum()
    assert tv < 0.01


def test_geometric_validates():
    with pytest.raises(ValueError):
        GeometricNoiseSampler(p=0.0)
    with pytest.raises(ValueError):
        GeometricNoiseSampler(p=0.5, k_max=-1)
