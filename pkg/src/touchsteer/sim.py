"""Planar peg-in-slot insertion with a vision/touch information split.

The peg is grasped with a hidden lateral offset and tilt. Visual features
carry global geometry only (gripper pose, slot position) and are constant
under offset changes; the tactile features carry a pressure profile keyed
to the in-hand offset plus the contact force, so only touch reveals how
the peg actually sits in the hand. The scripted expert reads the true
offset and threads the peg; a policy conditioned on vision alone has to
guess it.

Kinematics only: an action is a pose delta, collisions are resolved by
translation projection, and contact force is a linear spring on the
resolved penetration.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .episode import Episode, save_dataset
from .rngstreams import stream, substream
from .se3 import Se3Pose, compose, invert, pose_to_vec

VISUAL_DIM = 5
TACTILE_DIM = 10  # force (2) + pressure taxels (8)


@dataclass(frozen=True)
class SimConfig:
    slot_center_range: float = 0.3
    slot_width: float = 0.16
    slot_depth: float = 0.10
    peg_len: float = 0.4
    peg_width: float = 0.06
    e_max: float = 0.05          # lateral grasp offset bound (calibrated, frozen)
    phi_max: float = 0.25        # grasp tilt bound in radians
    stiffness: float = 50.0
    max_step_xy: float = 0.02
    max_step_theta: float = 0.05
    hover_clearance: float = 0.08
    seat_tol: float = 0.012
    tilt_tol: float = 0.2
    corner_margin: float = 0.002
    force_budget: float = 3.0    # cumulative |force| before the part breaks
    max_steps: int = 100
    rate_hz: float = 30.0
    start_x: float = 0.3
    start_y_low: float = 0.5
    start_y_high: float = 0.6
    start_theta: float = 0.1
    demo_jitter: float = 0.002


@dataclass
class SimState:
    x: float
    y: float
    theta: float
    offset_e: float
    offset_phi: float
    slot_x: float
    contact: bool = False
    force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    pressed: float = 0.0  # accumulated contact-force magnitude
    steps: int = 0

    def pose(self):
        return Se3Pose.from_planar(self.x, self.y, self.theta)


@dataclass(frozen=True)
class SimObservation:
    visual: np.ndarray   # (5,) gripper pose + slot position; offset-free
    tactile: np.ndarray  # (10,) contact force + grasp pressure profile


def _rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def peg_points(state, cfg, n_side=4):
    """Sampled boundary points of the peg (bottom corners first)."""
    g = np.array([state.x, state.y])
    grip = g + _rot(state.theta) @ np.array([state.offset_e, 0.0])
    axis = state.theta + state.offset_phi
    down = _rot(axis) @ np.array([0.0, -cfg.peg_len])
    side = _rot(axis) @ np.array([cfg.peg_width / 2.0, 0.0])
    tip = grip + down
    pts = [tip - side, tip + side]
    for f in np.linspace(0.0, 1.0, n_side)[1:]:
        base = grip + (1.0 - f) * down
        pts += [base - side, base + side]
    return tip, np.array(pts)


def _point_mtv(px, py, xl, xr, depth):
    """Minimum translation pushing a point out of the solid region."""
    if py >= 0.0:
        return None
    candidates = [np.array([0.0, -py])]  # up through the table top
    in_slot_x = xl < px < xr
    if py > -depth:
        if px <= xl:
            candidates.append(np.array([xl - px, 0.0]))
        elif px >= xr:
            candidates.append(np.array([xr - px, 0.0]))
        else:
            return None  # inside the slot opening: free space
    elif in_slot_x:
        candidates.append(np.array([0.0, -depth - py]))
    best = min(candidates, key=lambda v: np.hypot(*v))
    return best


class SlotSim:
    """Deterministic environment; all randomness enters through reset."""

    def __init__(self, config=None):
        self.cfg = config or SimConfig()
        self.state = None

    # ------------------------------------------------------------- lifecycle

    def reset(self, rng):
        cfg = self.cfg
        self.state = SimState(
            x=rng.uniform(-cfg.start_x, cfg.start_x),
            y=rng.uniform(cfg.start_y_low, cfg.start_y_high),
            theta=rng.uniform(-cfg.start_theta, cfg.start_theta),
            offset_e=rng.uniform(-cfg.e_max, cfg.e_max),
            offset_phi=rng.uniform(-cfg.phi_max, cfg.phi_max),
            slot_x=rng.uniform(-cfg.slot_center_range, cfg.slot_center_range),
        )
        return self.state

    # ----------------------------------------------------------- observation

    def observe(self, state=None):
        s = state or self.state
        visual = np.array([s.x, s.y, np.cos(s.theta), np.sin(s.theta), s.slot_x])
        centers = np.array([-0.75, -0.25, 0.25, 0.75])
        u = s.offset_e / self.cfg.e_max
        v = s.offset_phi / self.cfg.phi_max
        pad_e = np.exp(-((centers - 0.75 * u) / 0.35) ** 2)
        pad_phi = np.exp(-((centers - 0.75 * v) / 0.35) ** 2)
        tactile = np.concatenate([s.force, pad_e, pad_phi])
        return SimObservation(visual=visual, tactile=tactile)

    # ------------------------------------------------------------------ step

    def _resolve(self, state):
        cfg = self.cfg
        xl = state.slot_x - cfg.slot_width / 2.0
        xr = state.slot_x + cfg.slot_width / 2.0
        total = np.zeros(2)
        for _ in range(4):
            _, pts = peg_points(state, cfg)
            deepest, depth = None, 1e-9
            for px, py in pts:
                mtv = _point_mtv(px, py, xl, xr, cfg.slot_depth)
                if mtv is not None:
                    d = np.hypot(*mtv)
                    if d > depth:
                        deepest, depth = mtv, d
            if deepest is None:
                break
            state = replace(state, x=state.x + deepest[0], y=state.y + deepest[1])
            total += deepest
        return state, total

    def step(self, action):
        """Apply a clamped pose delta; returns (state, obs, done, success)."""
        cfg = self.cfg
        s = self.state
        dx = float(np.clip(action[0], -cfg.max_step_xy, cfg.max_step_xy))
        dy = float(np.clip(action[1], -cfg.max_step_xy, cfg.max_step_xy))
        dth = float(np.clip(action[2], -cfg.max_step_theta, cfg.max_step_theta))
        attempted = replace(s, x=s.x + dx, y=s.y + dy, theta=s.theta + dth)
        resolved, push = self._resolve(attempted)
        force = cfg.stiffness * push
        contact = bool(np.hypot(*push) > 1e-12)
        self.state = replace(
            resolved, contact=contact, force=force, steps=s.steps + 1,
            pressed=s.pressed + float(np.hypot(*force)),
        )
        if self.state.pressed > cfg.force_budget:
            return self.state, self.observe(), True, False  # part broken
        success = self.is_seated()
        done = success or self.state.steps >= cfg.max_steps
        return self.state, self.observe(), done, success

    def is_seated(self, state=None):
        cfg = self.cfg
        s = state or self.state
        tip, pts = peg_points(s, cfg)
        corners = pts[:2]
        in_opening = np.all(np.abs(corners[:, 0] - s.slot_x) <= cfg.slot_width / 2.0 - cfg.corner_margin)
        deep_enough = tip[1] <= -cfg.slot_depth + cfg.seat_tol
        upright = abs(s.theta + s.offset_phi) <= cfg.tilt_tol
        return bool(deep_enough and in_opening and upright)


# ------------------------------------------------------------------- expert


def expert_target(state, cfg, blind=False):
    """Gripper pose that seats the peg; blind=True ignores the true offset."""
    e = 0.0 if blind else state.offset_e
    phi = 0.0 if blind else state.offset_phi
    theta_t = -phi
    x_t = state.slot_x - e * np.cos(phi)
    aligned = abs(state.x - x_t) < 0.01 and abs(state.theta - theta_t) < 0.02
    y_offset = cfg.peg_len + e * np.sin(phi)
    if aligned:
        y_t = -cfg.slot_depth + 0.5 * cfg.seat_tol + y_offset
    else:
        y_t = max(cfg.hover_clearance + y_offset, state.y)
    return x_t, y_t, theta_t


def scripted_expert(state, cfg, blind=False):
    """One pose-delta action toward seating, using the true in-hand state."""
    x_t, y_t, theta_t = expert_target(state, cfg, blind=blind)
    return np.array([x_t - state.x, y_t - state.y, theta_t - state.theta])


# ------------------------------------------------------- demonstration data


def _planar_vec(x, y, theta):
    return pose_to_vec(Se3Pose.from_planar(x, y, theta))


def run_expert_episode(sim, episode_rng, jitter_rng=None, blind=False):
    """Roll the expert to termination, recording the episode arrays."""
    cfg = sim.cfg
    state = sim.reset(episode_rng)
    rows = {k: [] for k in ("visual", "tactile", "pose", "command", "gripper")}
    success = False
    for i in range(cfg.max_steps):
        obs = sim.observe()
        action = scripted_expert(state, cfg, blind=blind)
        if jitter_rng is not None:
            action = action + jitter_rng.normal(0.0, cfg.demo_jitter, size=3)
        rows["visual"].append(obs.visual)
        rows["tactile"].append(obs.tactile)
        rows["pose"].append(_planar_vec(state.x, state.y, state.theta))
        commanded = (
            state.x + np.clip(action[0], -cfg.max_step_xy, cfg.max_step_xy),
            state.y + np.clip(action[1], -cfg.max_step_xy, cfg.max_step_xy),
            state.theta + np.clip(action[2], -cfg.max_step_theta, cfg.max_step_theta),
        )
        rows["command"].append(_planar_vec(*commanded))
        rows["gripper"].append(1.0)
        state, obs, done, success = sim.step(action)
        if done:
            break
    n = len(rows["visual"])
    episode = Episode(
        timestamps=np.arange(n) / cfg.rate_hz,
        visual=np.array(rows["visual"]),
        tactile=np.array(rows["tactile"]),
        pose_state=np.array(rows["pose"]),
        gripper=np.array(rows["gripper"]),
        action_source=np.array(rows["command"]),
        meta={"task": "slot_insert", "rate_hz": cfg.rate_hz},
    )
    return episode, success


def collect_demonstrations(n, seed, config=None, out_dir=None):
    """n successful expert episodes; failures are discarded and resampled."""
    if n < 1:
        raise ValueError("need n >= 1 demonstrations")
    sim = SlotSim(config)
    episodes = []
    attempt = 0
    while len(episodes) < n:
        ep_rng = substream(seed, "demo-episode", attempt)
        jitter = substream(seed, "demo-jitter", attempt)
        episode, success = run_expert_episode(sim, ep_rng, jitter_rng=jitter)
        if success:
            episode.meta.update({"seed": int(seed), "attempt": attempt, "source": "scripted"})
            episodes.append(episode)
        attempt += 1
    if out_dir is not None:
        save_dataset(episodes, out_dir, extra_meta={"task": "slot_insert", "root_seed": int(seed)})
    return episodes


# --------------------------------------------------------------- evaluation


class ExpertChunkPolicy:
    """Replays the scripted expert as open-loop chunks of commanded poses."""

    def __init__(self, config, horizon=8, blind=False):
        self.cfg = config or SimConfig()
        self.horizon = horizon
        self.blind = blind

    def propose_batch(self, observations, states, rng=None):
        chunks = []
        for st in states:
            sim = SlotSim(self.cfg)
            sim.state = replace(st)
            targets = []
            for _ in range(self.horizon):
                action = scripted_expert(sim.state, self.cfg, blind=self.blind)
                s = sim.state
                cfgc = self.cfg
                targets.append((
                    s.x + float(np.clip(action[0], -cfgc.max_step_xy, cfgc.max_step_xy)),
                    s.y + float(np.clip(action[1], -cfgc.max_step_xy, cfgc.max_step_xy)),
                    s.theta + float(np.clip(action[2], -cfgc.max_step_theta, cfgc.max_step_theta)),
                ))
                sim.step(action)
            chunks.append(targets)
        return chunks


class RandomChunkPolicy:
    """Uniform random walk in pose space; the task floor."""

    def __init__(self, config, horizon=8):
        self.cfg = config or SimConfig()
        self.horizon = horizon

    def propose_batch(self, observations, states, rng=None):
        cfg = self.cfg
        chunks = []
        for st, r in zip(states, rng):
            x, y, th = st.x, st.y, st.theta
            targets = []
            for _ in range(self.horizon):
                x += r.uniform(-cfg.max_step_xy, cfg.max_step_xy)
                y += r.uniform(-cfg.max_step_xy, cfg.max_step_xy)
                th += r.uniform(-cfg.max_step_theta, cfg.max_step_theta)
                targets.append((x, y, th))
            chunks.append(targets)
        return chunks


def _as_chunk_policy(policy_fn, horizon):
    class _Wrapped:
        def propose_batch(self, observations, states, rng=None):
            return [policy_fn(obs) for obs in observations]

    w = _Wrapped()
    w.horizon = horizon
    return w


def evaluate(policy, n_rollouts, seed, config=None, horizon=8, log_path=None):
    """Roll the policy over seeded episodes in lockstep batches.

    ``policy`` either exposes propose_batch(observations, states, rng) ->
    per-rollout lists of (x, y, theta) absolute targets, or is a callable
    mapping an observation history to such a list. Returns a dict with the
    success rate, mean steps, and per-rollout records.
    """
    cfg = config or SimConfig()
    if not hasattr(policy, "propose_batch"):
        policy = _as_chunk_policy(policy, horizon)
    horizon = getattr(policy, "horizon", horizon)

    sims = [SlotSim(cfg) for _ in range(n_rollouts)]
    rngs = [substream(seed, "eval-episode", i) for i in range(n_rollouts)]
    chunk_rngs = [substream(seed, "eval-chunk", i) for i in range(n_rollouts)]
    for sim, r in zip(sims, rngs):
        sim.reset(r)
    active = list(range(n_rollouts))
    success = [False] * n_rollouts
    steps = [0] * n_rollouts
    histories = [[] for _ in range(n_rollouts)]
    errors = [None] * n_rollouts

    while active:
        obs = {}
        for i in active:
            obs[i] = sims[i].observe()
            histories[i].append(obs[i])
        try:
            chunks = policy.propose_batch(
                [histories[i] if _wants_history(policy) else obs[i] for i in active],
                [sims[i].state for i in active],
                rng=[chunk_rngs[i] for i in active],
            )
        except Exception as exc:  # a broken policy fails its rollouts, not the harness
            for i in active:
                errors[i] = repr(exc)
            break
        still = []
        for i, chunk in zip(active, chunks):
            done = False
            for target in chunk:
                s = sims[i].state
                action = np.array([target[0] - s.x, target[1] - s.y, target[2] - s.theta])
                _, _, done, won = sims[i].step(action)
                steps[i] = sims[i].state.steps
                if done:
                    success[i] = won
                    break
            if not done:
                still.append(i)
        active = still

    records = [
        {"rollout": i, "seed": int(seed), "success": bool(success[i]),
         "steps": int(steps[i]), "error": errors[i]}
        for i in range(n_rollouts)
    ]
    if log_path is not None:
        with open(log_path, "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
    rate = float(np.mean([r["success"] for r in records])) if records else 0.0
    return {
        "success_rate": rate,
        "mean_steps": float(np.mean(steps)) if steps else 0.0,
        "records": records,
    }


def _wants_history(policy):
    return getattr(policy, "wants_history", False)


def eval_stream(seed, index):
    """The per-rollout episode stream used by evaluate (exposed for tests)."""
    return substream(seed, "eval-episode", index)
