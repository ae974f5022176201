"""Named deterministic RNG streams.

All randomness descends from a root seed split into named streams, so two
code paths that must consume noise identically (e.g. guided sampling with
the guidance disabled vs. the unguided sampler) can share streams exactly.
"""

import hashlib

import numpy as np


def _digest(name):
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(root_seed, name):
    """Generator for (root_seed, name); stable across runs and platforms."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, _digest(name)]))


def substream(root_seed, name, index):
    """Indexed variant for per-rollout / per-worker streams."""
    return stream(root_seed, f"{name}/{int(index)}")
