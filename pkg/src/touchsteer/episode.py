"""Demonstration episodes and their on-disk format.

One episode file: magic ``TSEP``, version byte, a json metadata block, then
fixed-stride little-endian float64 arrays. Poses travel as 12-vectors
(rotation rows + translation). A dataset directory is one file per episode
plus a json manifest listing seeds and counts.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TSEP"
VERSION = 1
MANIFEST_NAME = "manifest.json"


class EpisodeFormatError(ValueError):
    """Bad magic, truncated payload, malformed structure."""


class EpisodeVersionError(EpisodeFormatError):
    """Readable container, unsupported schema version."""


class EpisodeValidationError(ValueError):
    """Structurally sound file whose contents violate invariants."""


@dataclass
class Episode:
    timestamps: np.ndarray    # (n,) seconds, strictly increasing
    visual: np.ndarray        # (n, dv) geometry features, no in-hand state
    tactile: np.ndarray       # (n, dt) contact force + pressure profile
    pose_state: np.ndarray    # (n, 12) absolute end-effector pose
    gripper: np.ndarray       # (n,)
    action_source: np.ndarray  # (n, 12) commanded pose per step
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.timestamps)

    def validate(self):
        n = len(self.timestamps)
        for name in ("visual", "tactile", "pose_state", "gripper", "action_source"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise EpisodeValidationError(f"{name} has {len(arr)} rows, expected {n}")
            if not np.isfinite(arr).all():
                raise EpisodeValidationError(f"{name} contains non-finite values")
        if self.pose_state.shape[1:] != (12,) or self.action_source.shape[1:] != (12,):
            raise EpisodeValidationError("pose arrays must be (n, 12)")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise EpisodeValidationError("timestamps must be strictly increasing")
        return self


def save_episode(episode, path):
    episode.validate()
    n = len(episode)
    dv = episode.visual.shape[1]
    dt = episode.tactile.shape[1]
    meta_blob = json.dumps(episode.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<IHH", n, dv, dt))
        for arr in (episode.timestamps, episode.visual, episode.tactile,
                    episode.pose_state, episode.gripper, episode.action_source):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_episode(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise EpisodeFormatError(f"{path}: bad magic {blob[:4]!r}")
    if blob[4] != VERSION:
        raise EpisodeVersionError(f"{path}: unsupported version {blob[4]}")
    pos = 5

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(blob):
            raise EpisodeFormatError(f"{path}: truncated at byte {pos}")
        out = blob[pos:pos + nbytes]
        pos += nbytes
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EpisodeFormatError(f"{path}: bad metadata block ({exc})") from None
    n, dv, dt = struct.unpack("<IHH", take(8))

    def arr(*shape):
        count = int(np.prod(shape))
        return np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()

    episode = Episode(
        timestamps=arr(n),
        visual=arr(n, dv),
        tactile=arr(n, dt),
        pose_state=arr(n, 12),
        gripper=arr(n),
        action_source=arr(n, 12),
        meta=meta,
    )
    if pos != len(blob):
        raise EpisodeFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return episode.validate()


def save_dataset(episodes, out_dir, extra_meta=None):
    """Write one file per episode plus the manifest; returns the manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    files, seeds = [], []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:05d}.tsep"
        save_episode(ep, out_dir / name)
        files.append(name)
        seeds.append(ep.meta.get("seed"))
    manifest = {
        "schema_version": 1,
        "count": len(files),
        "files": files,
        "seeds": seeds,
    }
    if extra_meta:
        manifest.update(extra_meta)
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir):
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise EpisodeFormatError(f"{data_dir}: no {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != 1:
        raise EpisodeVersionError(f"{data_dir}: unsupported manifest schema")
    episodes = [load_episode(data_dir / name) for name in manifest["files"]]
    return episodes, manifest
