"""Guided sampling: steer a generative policy with a feasibility gradient.

Both families share one loop. The policy runs the plain chain; inside the
late guidance window the score gradient with respect to the current noisy
action chunk is folded into the prediction:

    diffusion:  eps_hat = eps - eta * sqrt(1 - abar_k) * grad
    flow:       u_hat   = u   - eta * (t / (1 - t))    * grad

With eta = 0 or an empty window the guidance branch is never entered, so
outputs are bit-identical to unguided sampling under shared RNG streams.
RNG discipline: one stream for the initial noise, one for ancestral step
noise, held per batch row so results do not depend on batch packing.
"""

import time as _time
from dataclasses import dataclass

import numpy as np

from .schedulers import ddpm_posterior, guidance_coefficient


@dataclass(frozen=True)
class GuidanceConfig:
    family: str                      # "diffusion" | "flow"
    eta: float = 0.0                 # guidance scale >= 0
    guide_steps: float = 0.0         # window: step count (diffusion) or t fraction (flow)
    num_steps: int = 0               # total K (diffusion) or N (flow); 0 = schedule default
    max_grad_norm: float | None = None  # optional per-sample clip; off by default (not part of the update rule)

    def __post_init__(self):
        if self.family not in ("diffusion", "flow"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.family == "flow":
            if not 0.0 <= self.guide_steps < 1.0:
                raise ValueError(f"flow guide window must lie in [0, 1), got {self.guide_steps}")
        else:
            if self.guide_steps < 0 or self.guide_steps != int(self.guide_steps):
                raise ValueError(f"diffusion guide window must be a step count >= 0, got {self.guide_steps}")


def guided_epsilon(eps, grad_s, k, eta, schedule):
    """Steered noise prediction at 0-based level k."""
    grad_s = np.asarray(grad_s, dtype=np.float64)
    if grad_s.shape != np.shape(eps):
        raise ValueError(f"guided_epsilon: shape mismatch {np.shape(eps)} vs {grad_s.shape}")
    if not np.isfinite(grad_s).all():
        raise FloatingPointError("guided_epsilon: non-finite score gradient")
    return eps - eta * guidance_coefficient("diffusion", k, schedule) * grad_s


def guided_velocity(u, grad_s, t, eta):
    """Steered velocity at time t in [0, 1)."""
    grad_s = np.asarray(grad_s, dtype=np.float64)
    if grad_s.shape != np.shape(u):
        raise ValueError(f"guided_velocity: shape mismatch {np.shape(u)} vs {grad_s.shape}")
    if not np.isfinite(grad_s).all():
        raise FloatingPointError("guided_velocity: non-finite score gradient")
    return u - eta * guidance_coefficient("flow", t) * grad_s


def _as_rng_list(rng, batch):
    if isinstance(rng, (list, tuple)):
        if len(rng) != batch:
            raise ValueError(f"need {batch} generators, got {len(rng)}")
        return list(rng)
    return [rng] * batch


def _stack_noise(rngs, shape):
    return np.stack([r.standard_normal(shape) for r in rngs])


def _clip_rows(grad, max_norm):
    flat = grad.reshape(len(grad), -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    factor = np.minimum(1.0, max_norm / np.maximum(norms, 1e-12))
    return (flat * factor).reshape(grad.shape)


def guided_sample(policy, scorer, visual, tactile, config, rng, schedule=None, path=None,
                  _flow_coef=None):
    """Run the full sampling chain, steering inside the guidance window.

    policy: exposes .family, .action_shape and predict_batch(x, time, visual).
    scorer: exposes grad_batch(visual, tactile, x, time) -> dS/dx, or None.
    visual/tactile: (B, dv)/(B, dt) conditioning arrays (B rows of the batch).
    rng: one Generator, or one per batch row for batch-size invariance.
    _flow_coef: test hook replacing the flow guidance coefficient (the
    intentional-bug harness for the validation suite); leave None.
    """
    if policy.family != config.family:
        raise ValueError(f"policy family {policy.family!r} != config family {config.family!r}")
    visual = np.atleast_2d(np.asarray(visual, dtype=np.float64))
    tactile = np.atleast_2d(np.asarray(tactile, dtype=np.float64))
    batch = visual.shape[0]
    shape = tuple(policy.action_shape)
    init_rngs = _as_rng_list(rng, batch)

    active = scorer is not None and config.eta != 0.0 and config.guide_steps > 0

    x = _stack_noise(init_rngs, shape)
    if config.family == "diffusion":
        if schedule is None:
            raise ValueError("diffusion sampling needs a DdpmSchedule")
        K = schedule.num_steps
        for k in range(K, 0, -1):
            eps = policy.predict_batch(x, k - 1, visual)
            if active and k <= config.guide_steps:
                grad = scorer.grad_batch(visual, tactile, x, k - 1)
                if config.max_grad_norm is not None:
                    grad = _clip_rows(grad, config.max_grad_norm)
                eps = guided_epsilon(eps, grad, k - 1, config.eta, schedule)
            mean, std = ddpm_posterior(x, eps, k, schedule)
            x = mean if std == 0.0 else mean + std * _stack_noise(init_rngs, shape)
        return x

    if path is None:
        raise ValueError("flow sampling needs an FmPath")
    dt = path.dt
    for t in path.times():
        t = float(t)
        u = policy.predict_batch(x, t, visual)
        if active and t <= config.guide_steps:
            grad = scorer.grad_batch(visual, tactile, x, t)
            if config.max_grad_norm is not None:
                grad = _clip_rows(grad, config.max_grad_norm)
            if _flow_coef is None:
                u = guided_velocity(u, grad, t, config.eta)
            else:
                u = u - config.eta * _flow_coef(t) * grad
        x = x + dt * u
    return x


def sample_unguided(policy, visual, config, rng, schedule=None, path=None):
    """The plain chain: guided_sample with the guidance branch disabled."""
    off = GuidanceConfig(family=config.family, eta=0.0, guide_steps=0.0)
    dummy_tactile = np.zeros((np.atleast_2d(visual).shape[0], 0))
    return guided_sample(policy, None, visual, dummy_tactile, off, rng,
                         schedule=schedule, path=path)


class AnalyticFlowPolicy:
    """Exact marginal velocity field of a 1D mixture (ignores conditioning)."""

    family = "flow"
    action_shape = (1, 1)

    def __init__(self, spec):
        self.spec = spec

    def predict_batch(self, x, t, visual):
        from . import mixtures

        t = min(float(t), 1.0 - 1e-9)  # field is singular-but-finite at t=1
        return mixtures.marginal_velocity_oracle(self.spec, x.ravel(), t).reshape(x.shape)


class AnalyticDdpmPolicy:
    """Exact posterior-mean noise predictor of a 1D mixture."""

    family = "diffusion"
    action_shape = (1, 1)

    def __init__(self, spec, schedule):
        self.spec = spec
        self.schedule = schedule

    def predict_batch(self, x, level, visual):
        from . import mixtures

        return mixtures.ddpm_optimal_epsilon(self.spec, x.ravel(), level, self.schedule).reshape(x.shape)


class AnalyticClassifier:
    """Exact grad log p(y | x_t) for a labeled mixture."""

    def __init__(self, spec, target, family, schedule=None):
        self.spec = spec
        self.target = target
        self.family = family
        self.schedule = schedule

    def grad_batch(self, visual, tactile, x, time):
        from . import mixtures

        if self.family == "flow":
            g = mixtures.fm_class_log_posterior_grad(self.spec, x.ravel(), float(time), self.target)
        else:
            g = mixtures.ddpm_class_log_posterior_grad(self.spec, x.ravel(), int(time), self.schedule, self.target)
        return g.reshape(x.shape)


def analytic_guidance_check(spec, etas, target, family="flow", n_samples=10_000,
                            num_steps=200, seed=0, schedule=None, _flow_coef=None):
    """Sweep eta with exact fields and report per-eta sample statistics.

    Rows carry the fraction of samples landing on the target class and the
    KS divergence from the true class-conditional (recorded, not asserted:
    the divergence-vs-eta curve is allowed to be non-monotone).
    """
    from . import mixtures
    from .rngstreams import stream
    from .schedulers import DdpmSchedule, FmPath

    if len(spec.classes()) < 2:
        raise ValueError("guidance check needs at least two classes")
    if family == "flow":
        path, sched = FmPath(num_steps), None
        policy = AnalyticFlowPolicy(spec)
        window = (num_steps - 1) / num_steps
    else:
        sched = schedule or DdpmSchedule.make(num_steps)
        path = None
        policy = AnalyticDdpmPolicy(spec, sched)
        window = sched.num_steps
    scorer = AnalyticClassifier(spec, target, family, schedule=sched)
    visual = np.zeros((n_samples, 0))
    tactile = np.zeros((n_samples, 0))
    cond_cdf = mixtures.class_conditional_cdf(spec, target)

    rows = []
    for eta in etas:
        config = GuidanceConfig(family=family, eta=float(eta), guide_steps=window if eta else 0.0)
        rng = stream(seed, f"guidance-check/{family}/{eta}")
        samples = guided_sample(policy, scorer if eta else None, visual, tactile, config, rng,
                                schedule=sched, path=path, _flow_coef=_flow_coef).ravel()
        mass = float(np.mean(mixtures.classify(spec, samples) == target))
        rows.append({
            "eta": float(eta),
            "target_mass": mass,
            "ks_divergence": float(mixtures.ks_distance(samples, cond_cdf)),
            "sample_mean": float(samples.mean()),
            "sample_std": float(samples.std()),
        })
    return rows


def latency_probe(policy, scorer, visual, tactile, config, rng, trials=25,
                  schedule=None, path=None):
    """Median per-chunk wall time, unguided vs guided, plus overhead.

    Returns (unguided_ms, guided_ms, overhead_percent). Models should be
    warm (call once before timing matters to the caller).
    """
    def clock(fn):
        times = []
        for _ in range(trials):
            t0 = _time.perf_counter()
            fn()
            times.append((_time.perf_counter() - t0) * 1e3)
        return float(np.median(times))

    kw = dict(schedule=schedule, path=path)
    off = GuidanceConfig(family=config.family, eta=0.0, guide_steps=0.0)
    guided_sample(policy, scorer, visual, tactile, config, rng, **kw)  # warmup
    unguided_ms = clock(lambda: guided_sample(policy, None, visual, tactile, off, rng, **kw))
    guided_ms = clock(lambda: guided_sample(policy, scorer, visual, tactile, config, rng, **kw))
    overhead = 100.0 * (guided_ms - unguided_ms) / unguided_ms
    return unguided_ms, guided_ms, overhead
