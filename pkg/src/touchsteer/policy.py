"""Vision-conditioned generative action policies.

One network class serves both families: an epsilon predictor trained with
the standard denoising objective, or a velocity predictor trained on the
conditional velocity of the linear path. A 3-layer MLP over the flattened
noisy chunk, a sinusoidal time embedding, and the conditioning vector.
The sampling chain runs in normalized action space; the conditioning
normalizer lives inside the network so callers pass raw features.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_params, save_params
from .data import Normalizer
from .nn import MLP, Module, sinusoidal_features
from .nn import Adam
from .rngstreams import stream
from .schedulers import ddpm_add_noise
from .tensor import Tensor

FAMILIES = ("diffusion", "flow")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 40
    seed: int = 0
    warmup: int = 100

    def __post_init__(self):
        for name in ("batch_size", "lr", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")


class PolicyNet(Module):
    def __init__(self, family, horizon, action_dim, cond_dim, rng,
                 hidden=1024, time_dim=16, action_param="rot12"):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        self.family = family
        self.horizon = horizon
        self.action_dim = action_dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.time_dim = time_dim
        self.action_param = action_param
        flat = horizon * action_dim
        self.mlp = MLP([flat + time_dim + cond_dim, hidden, hidden, flat], rng)
        self.action_norm = Normalizer.identity(action_dim)
        self.cond_norm = Normalizer.identity(cond_dim)

    @property
    def action_shape(self):
        return (self.horizon, self.action_dim)

    def named_params(self):
        return [(f"mlp.{n}", p) for n, p in self.mlp.named_params()]

    def _check_time(self, time):
        if self.family == "diffusion":
            if isinstance(time, bool) or not isinstance(time, (int, np.integer)):
                raise TypeError(f"diffusion expects an integer step, got {time!r}")
            if time < 0:
                raise ValueError(f"negative step {time}")
        else:
            if isinstance(time, (bool, int, np.integer)) or not isinstance(time, (float, np.floating)):
                raise TypeError(f"flow expects a fractional time, got {time!r}")
            if not 0.0 <= time <= 1.0:
                raise ValueError(f"flow time {time} outside [0, 1]")

    def forward(self, noisy, time_values, cond):
        """Tape-recorded forward pass; noisy is (B, H*A) normalized."""
        feats = sinusoidal_features(time_values, self.time_dim)
        if feats.shape[0] == 1 and noisy.shape[0] > 1:
            feats = np.repeat(feats, noisy.shape[0], axis=0)
        x = T.concat([noisy, Tensor(feats), Tensor(cond)], axis=-1)
        return self.mlp(x)

    def predict(self, noisy_action, time, cond):
        """Single-condition prediction in normalized action space."""
        out = self.predict_batch(np.asarray(noisy_action)[None], time, np.asarray(cond)[None])
        return out[0]

    def predict_batch(self, x, time, cond):
        """(B, H, A) noisy chunks + raw conditioning -> (B, H, A) prediction."""
        self._check_time(time)
        b = x.shape[0]
        cond_n = self.cond_norm.encode(np.atleast_2d(cond)) if self.cond_dim else np.zeros((b, 0))
        with T.no_grad():
            out = self.forward(Tensor(x.reshape(b, -1)), np.full(b, float(time)), cond_n)
        return out.data.reshape(x.shape)


def train_policy(net, dataset, config, schedule=None):
    """Fit the denoiser/velocity head on chunk data; returns the loss curve.

    dataset: dict with "chunks" (N, H, A) raw and "cond" (N, dc) raw, as
    produced by data.build_chunks. Normalizers are fit here and stored on
    the network.
    """
    chunks = dataset["chunks"]
    cond = dataset["cond"]
    n, horizon, action_dim = chunks.shape
    if n == 0:
        raise ValueError("empty dataset")
    if (horizon, action_dim) != net.action_shape:
        raise ValueError(f"chunk shape {(horizon, action_dim)} != net {net.action_shape}")
    if net.family == "diffusion" and schedule is None:
        raise ValueError("diffusion training needs a schedule")

    net.action_norm = Normalizer.fit(chunks)
    if net.cond_dim:
        net.cond_norm = Normalizer.fit(cond)
    acts = net.action_norm.encode(chunks).reshape(n, -1)
    conds = net.cond_norm.encode(cond) if net.cond_dim else np.zeros((n, 0))

    order_rng = stream(config.seed, "policy-batches")
    noise_rng = stream(config.seed, "policy-noise")
    opt = Adam(net.params(), lr=config.lr, warmup=config.warmup)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * batches_per_epoch
    losses = []
    step_no = 0
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            # cosine decay to 5% of the base rate, after warmup
            frac = step_no / max(total_steps - 1, 1)
            opt.lr = config.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))
            step_no += 1
            idx = perm[lo:lo + config.batch_size]
            x0 = acts[idx]
            eps = noise_rng.standard_normal(x0.shape)
            if net.family == "diffusion":
                levels = noise_rng.integers(0, schedule.num_steps, size=len(idx))
                ab = schedule.alpha_bars[levels][:, None]
                noisy = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
                target, times = eps, levels.astype(np.float64)
            else:
                ts = noise_rng.uniform(0.0, 1.0, size=len(idx))[:, None]
                noisy = (1.0 - ts) * x0 + ts * eps
                target, times = eps - x0, ts.ravel()
            pred = net.forward(Tensor(noisy), times, conds[idx])
            diff = T.sub(pred, Tensor(target))
            loss = T.mean(T.mul(diff, diff))
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"policy training diverged at epoch {epoch} (loss={value})")
            opt.step(T.backward(loss))
            losses.append(value)
    return losses


# ------------------------------------------------------------- persistence

_FAMILY_CODE = {"diffusion": 0.0, "flow": 1.0}
_PARAM_CODE = {"rot12": 0.0, "planar": 1.0}


def save_policy(net, path):
    records = [
        ("config/family", np.array(_FAMILY_CODE[net.family])),
        ("config/horizon", np.array(float(net.horizon))),
        ("config/action_dim", np.array(float(net.action_dim))),
        ("config/cond_dim", np.array(float(net.cond_dim))),
        ("config/hidden", np.array(float(net.hidden))),
        ("config/time_dim", np.array(float(net.time_dim))),
        ("config/action_param", np.array(_PARAM_CODE[net.action_param])),
        ("norm/action_mean", net.action_norm.mean),
        ("norm/action_std", net.action_norm.std),
        ("norm/cond_mean", net.cond_norm.mean),
        ("norm/cond_std", net.cond_norm.std),
    ]
    records += [(f"param/{name}", p.data) for name, p in net.named_params()]
    save_params(path, records)


def load_policy(path):
    table = dict(load_params(path))
    family = "diffusion" if table["config/family"] == 0.0 else "flow"
    param = "rot12" if table["config/action_param"] == 0.0 else "planar"
    net = PolicyNet(
        family=family,
        horizon=int(table["config/horizon"]),
        action_dim=int(table["config/action_dim"]),
        cond_dim=int(table["config/cond_dim"]),
        rng=np.random.default_rng(0),
        hidden=int(table["config/hidden"]),
        time_dim=int(table["config/time_dim"]),
        action_param=param,
    )
    net.action_norm = Normalizer(table["norm/action_mean"], table["norm/action_std"])
    net.cond_norm = Normalizer(table["norm/cond_mean"], table["norm/cond_std"])
    net.load_named([(k[len("param/"):], v) for k, v in table.items() if k.startswith("param/")])
    return net
