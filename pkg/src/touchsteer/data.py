"""Training-set assembly from demonstration episodes.

Action chunks are the next H commanded poses re-expressed relative to the
pose observed at decision time (the chunk's reference frame), so the same
motion recorded anywhere in the workspace yields the same chunk. Policy
conditioning is the visual feature vector plus the absolute pose state.

Two chunk parameterizations: "rot12" (translation + flattened rotation
rows, 12 per step) and "planar" (x, y, yaw, 3 per step).
"""

from dataclasses import dataclass

import numpy as np

from .se3 import Se3Pose, compose, invert, pose_to_vec, vec_to_pose

ACTION_DIMS = {"rot12": 12, "planar": 3}


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, arr, floor=1e-6):
        arr = arr.reshape(-1, arr.shape[-1])
        return cls(arr.mean(axis=0), np.maximum(arr.std(axis=0), floor))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def encode(self, x):
        return (x - self.mean) / self.std

    def decode(self, x):
        return x * self.std + self.mean


def _rel_to_action(rel, param):
    if param == "rot12":
        return pose_to_vec(rel)
    x, y, theta = rel.to_planar()
    return np.array([x, y, theta])


def _action_to_rel(vec, param):
    if param == "rot12":
        return vec_to_pose(vec)
    return Se3Pose.from_planar(vec[0], vec[1], vec[2])


def chunk_from_poses(ref_pose, future_poses, param="rot12"):
    """Relative chunk: future commanded poses in the frame of the reference."""
    inv_ref = invert(ref_pose)
    return np.array([_rel_to_action(compose(inv_ref, p), param) for p in future_poses])


def chunk_to_targets(chunk, current_pose, param="rot12"):
    """Absolute planar (x, y, theta) targets from a relative chunk."""
    targets = []
    for row in np.asarray(chunk, dtype=np.float64):
        absolute = compose(current_pose, _action_to_rel(row, param))
        targets.append(absolute.to_planar())
    return targets


def build_chunks(episodes, horizon, param="rot12"):
    """Flatten episodes into per-step training rows.

    Returns dict of arrays: visual (N, dv), tactile (N, dt), cond (N, dv+12),
    chunks (N, H, A), episode (N,), step (N,).
    """
    if param not in ACTION_DIMS:
        raise ValueError(f"unknown action parameterization {param!r}")
    visual, tactile, cond, chunks, ep_ids, steps = [], [], [], [], [], []
    for ei, ep in enumerate(episodes):
        n = len(ep)
        poses = [vec_to_pose(v) for v in ep.pose_state]
        commands = [vec_to_pose(v) for v in ep.action_source]
        for i in range(n):
            future = [commands[min(i + j, n - 1)] for j in range(horizon)]
            chunks.append(chunk_from_poses(poses[i], future, param))
            visual.append(ep.visual[i])
            tactile.append(ep.tactile[i])
            cond.append(np.concatenate([ep.visual[i], ep.pose_state[i]]))
            ep_ids.append(ei)
            steps.append(i)
    return {
        "visual": np.array(visual),
        "tactile": np.array(tactile),
        "cond": np.array(cond),
        "chunks": np.array(chunks),
        "episode": np.array(ep_ids),
        "step": np.array(steps),
    }
