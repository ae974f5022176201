"""End-to-end wiring: demonstrations -> trained models -> steered rollouts.

The policy conditions on the visual features plus the absolute pose state;
the feasibility model sees the visual features and the tactile features.
Rollout evaluation proposes whole action chunks: the sampler runs in
normalized action space, chunks decode to absolute pose targets relative
to the decision-time pose.
"""

from dataclasses import dataclass, field

import numpy as np

from .cpm import CpmConfig, CpmModel, CpmTrainConfig, retrieval_accuracy, corrupt_actions, train_cpm
from .data import ACTION_DIMS, build_chunks, chunk_to_targets
from .policy import PolicyNet, TrainConfig, train_policy
from .rngstreams import stream, substream
from .schedulers import DdpmSchedule, FmPath, GeometricNoiseSampler
from .se3 import Se3Pose
from .sim import SimConfig, VISUAL_DIM, TACTILE_DIM, evaluate
from .steering import GuidanceConfig, guided_sample

POSE_DIM = 12


@dataclass(frozen=True)
class PipelineConfig:
    family: str = "flow"
    horizon: int = 8
    action_param: str = "rot12"
    hidden: int = 1024
    diffusion_steps: int = 100
    beta_schedule: str = "squaredcos"
    flow_steps: int = 10
    geometric_p: float = 0.1
    # paper-analog defaults: eta 4 / window 20 steps for diffusion,
    # eta 10 / window 0.3 for flow
    eta: float = 10.0
    guide_steps: float = 0.3
    policy_train: TrainConfig = field(default_factory=TrainConfig)
    cpm_train: CpmTrainConfig = field(default_factory=CpmTrainConfig)
    cpm_arch: CpmConfig = field(default_factory=CpmConfig)

    def __post_init__(self):
        if self.family not in ("diffusion", "flow"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.action_param not in ACTION_DIMS:
            raise ValueError(f"unknown action parameterization {self.action_param!r}")

    @property
    def action_dim(self):
        return ACTION_DIMS[self.action_param]

    @property
    def cond_dim(self):
        return VISUAL_DIM + POSE_DIM

    def schedule(self):
        return DdpmSchedule.make(self.diffusion_steps, self.beta_schedule) \
            if self.family == "diffusion" else None

    def fm_path(self):
        return FmPath(self.flow_steps) if self.family == "flow" else None

    def geometric_sampler(self):
        k_max = int(self.guide_steps) if self.family == "diffusion" \
            else int(round(self.guide_steps * self.flow_steps))
        return GeometricNoiseSampler(p=self.geometric_p, k_max=max(k_max, 1))

    def guidance(self, eta=None, guide_steps=None):
        return GuidanceConfig(
            family=self.family,
            eta=self.eta if eta is None else eta,
            guide_steps=self.guide_steps if guide_steps is None else guide_steps,
        )


def fit_policy(episodes, cfg, seed=0):
    data = build_chunks(episodes, cfg.horizon, cfg.action_param)
    net = PolicyNet(cfg.family, cfg.horizon, cfg.action_dim, cfg.cond_dim,
                    stream(seed, "policy-init"), hidden=cfg.hidden,
                    action_param=cfg.action_param)
    losses = train_policy(net, data, cfg.policy_train, schedule=cfg.schedule())
    return net, losses


def fit_cpm(episodes, cfg, seed=0, arch=None, train_cfg=None):
    data = build_chunks(episodes, cfg.horizon, cfg.action_param)
    model = CpmModel(VISUAL_DIM, TACTILE_DIM, cfg.horizon, cfg.action_dim,
                     stream(seed, "cpm-init"), config=arch or cfg.cpm_arch)
    losses, metrics = train_cpm(
        model, data, train_cfg or cfg.cpm_train, cfg.family,
        schedule=cfg.schedule() or DdpmSchedule.make(cfg.diffusion_steps, cfg.beta_schedule),
        geom=cfg.geometric_sampler(), flow_steps=cfg.flow_steps)
    return model, losses, metrics


class CpmScorer:
    """Adapts the feasibility model to the sampler's scorer interface.

    The sampler hands over the policy conditioning vector; the feasibility
    model sees only its leading visual-feature block plus the tactile
    stream, per its training inputs.
    """

    def __init__(self, model, visual_dim=VISUAL_DIM):
        self.model = model
        self.visual_dim = visual_dim

    def grad_batch(self, cond, tactile, x, time):
        return self.model.grad_batch(cond[:, :self.visual_dim], tactile, x, time)


class NetChunkPolicy:
    """Chunk proposals by (optionally steered) sampling from a policy net."""

    def __init__(self, net, pipeline_cfg, cpm=None, eta=None, guide_steps=None):
        self.net = net
        self.cfg = pipeline_cfg
        self.scorer = CpmScorer(cpm) if cpm is not None else None
        self.guidance = pipeline_cfg.guidance(eta=eta, guide_steps=guide_steps)
        self.horizon = net.horizon
        self.schedule = pipeline_cfg.schedule()
        self.path = pipeline_cfg.fm_path()
        if cpm is not None and not np.allclose(cpm.action_norm.std, net.action_norm.std):
            raise ValueError("policy and feasibility model use different action normalizers")

    def propose_batch(self, observations, states, rng=None):
        poses = [s.pose() for s in states]
        cond = np.stack([
            np.concatenate([obs.visual, np.concatenate([p.rot.ravel(), p.trans])])
            for obs, p in zip(observations, poses)
        ])
        tactile = np.stack([obs.tactile for obs in observations])
        chunks_norm = guided_sample(
            self.net, self.scorer, cond, tactile, self.guidance, rng,
            schedule=self.schedule, path=self.path)
        chunks = self.net.action_norm.decode(chunks_norm)
        return [chunk_to_targets(chunk, pose, self.cfg.action_param)
                for chunk, pose in zip(chunks, poses)]


def success_protocol(policy_factory, repeats, rollouts, seed, sim_config=None):
    """Mean success rate with SEM over repeated evaluations.

    Each repeat evaluates ``rollouts`` fresh episodes under its own seed;
    the SEM is s/sqrt(n) over the repeat-level rates.
    """
    rates = []
    for r in range(repeats):
        res = evaluate(policy_factory(), rollouts, seed=seed * 1000 + r, config=sim_config)
        rates.append(res["success_rate"])
    rates = np.array(rates)
    sem = rates.std(ddof=1) / np.sqrt(len(rates)) if len(rates) > 1 else 0.0
    return {"mean": float(rates.mean()), "sem": float(sem), "rates": rates.tolist()}


def heldout_retrieval(model, episodes, cfg, level, seed=0, batches=40, m=32):
    """Top-1 retrieval on held-out pairs with queries noised to ``level``.

    Candidate sets are sampled freely (same-phase distractors allowed), so
    single-modality models cannot hide behind trajectory phase alone.
    """
    data = build_chunks(episodes, cfg.horizon, cfg.action_param)
    acts = model.action_norm.encode(data["chunks"])
    rng = stream(seed, "retrieval")
    schedule = cfg.schedule() or DdpmSchedule.make(cfg.diffusion_steps, cfg.beta_schedule)
    accs = []
    for _ in range(batches):
        idx = rng.choice(len(acts), size=min(m, len(acts)), replace=False)
        noisy = corrupt_actions(acts[idx], np.full(len(idx), level), cfg.family,
                                schedule, cfg.flow_steps, rng)
        accs.append(retrieval_accuracy(model, data["visual"][idx], data["tactile"][idx], noisy))
    return float(np.mean(accs))


def sweep_guidance(net, cpm, cfg, param, grid, repeats, rollouts, seed, sim_config=None):
    """Hold one steering hyperparameter fixed, sweep the other."""
    if param not in ("eta", "ktg"):
        raise ValueError("param must be 'eta' or 'ktg'")
    rows = []
    for value in grid:
        kw = {"eta": float(value)} if param == "eta" else {"guide_steps": float(value)}
        stats = success_protocol(
            lambda: NetChunkPolicy(net, cfg, cpm=cpm, **kw),
            repeats, rollouts, seed, sim_config=sim_config)
        rows.append({
            "param": param, "value": float(value),
            "eta": kw.get("eta", cfg.eta),
            "ktg": kw.get("guide_steps", cfg.guide_steps),
            "mean": stats["mean"], "sem": stats["sem"], "repeats": repeats,
            "rollouts": rollouts,
        })
    return rows
