"""Contact feasibility model: contrastive visuo-tactile action scoring.

Observation branch: modality-specific MLP encoders produce one token per
modality (plus a learned modality embedding), a small transformer encoder
fuses them, and the pooled output is projected and L2-normalized. Action
branch: 1D convolution over the chunk's time axis, then an MLP, then L2
normalization. The feasibility score is the cosine similarity of the two
unit embeddings; its gradient with respect to the action is the steering
signal.

Training is symmetric InfoNCE over in-batch pairs with a learnable
temperature (stored as a log-inverse so positivity is structural), with
ground-truth actions corrupted to geometric noise levels so the score
stays informative on the noisy actions seen mid-sampling.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_params, save_params
from .data import Normalizer
from .nn import MLP, Adam, Conv1d, LayerNorm, Linear, Module, TransformerLayer
from .rngstreams import stream
from .tensor import Tensor


@dataclass(frozen=True)
class CpmConfig:
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    encoder_hidden: int = 64
    action_channels: int = 32
    conv_kernel: int = 3
    use_vision: bool = True
    use_touch: bool = True
    init_inv_tau: float = 10.0

    def __post_init__(self):
        if not (self.use_vision or self.use_touch):
            raise ValueError("at least one observation modality is required")


@dataclass(frozen=True)
class CpmTrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    steps: int = 3000
    seed: int = 0
    warmup: int = 100
    noise_pretrain: bool = True
    metrics_every: int = 250


class CpmModel(Module):
    def __init__(self, visual_dim, tactile_dim, horizon, action_dim, rng, config=None):
        cfg = config or CpmConfig()
        self.config = cfg
        self.visual_dim = visual_dim
        self.tactile_dim = tactile_dim
        self.horizon = horizon
        self.action_dim = action_dim
        d = cfg.embed_dim
        self.visual_enc = MLP([visual_dim, cfg.encoder_hidden, d], rng) if cfg.use_vision else None
        self.tactile_enc = MLP([tactile_dim, cfg.encoder_hidden, d], rng) if cfg.use_touch else None
        self.emb_touch = Tensor(rng.normal(0.0, 0.1, size=d), requires_grad=True)
        self.emb_vision = Tensor(rng.normal(0.0, 0.1, size=d), requires_grad=True)
        self.fusion = [TransformerLayer(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.out_ln = LayerNorm(d)
        self.obs_proj = Linear(d, d, rng, bias_std=0.1)
        self.action_conv = Conv1d(action_dim, cfg.action_channels, cfg.conv_kernel, rng)
        self.action_mlp = MLP([cfg.action_channels * horizon, 2 * cfg.encoder_hidden, d],
                              rng, final_bias_std=0.1)
        self.log_inv_tau = Tensor(np.log(cfg.init_inv_tau), requires_grad=True)
        self.visual_norm = Normalizer.identity(visual_dim)
        self.tactile_norm = Normalizer.identity(tactile_dim)
        self.action_norm = Normalizer.identity(action_dim)

    def named_params(self):
        out = [("emb_touch", self.emb_touch), ("emb_vision", self.emb_vision),
               ("log_inv_tau", self.log_inv_tau)]
        if self.visual_enc is not None:
            out += [(f"venc.{n}", p) for n, p in self.visual_enc.named_params()]
        if self.tactile_enc is not None:
            out += [(f"tenc.{n}", p) for n, p in self.tactile_enc.named_params()]
        for i, layer in enumerate(self.fusion):
            out += [(f"fusion{i}.{n}", p) for n, p in layer.named_params()]
        out += [(f"out_ln.{n}", p) for n, p in self.out_ln.named_params()]
        out += [(f"obs_proj.{n}", p) for n, p in self.obs_proj.named_params()]
        out += [(f"aconv.{n}", p) for n, p in self.action_conv.named_params()]
        out += [(f"amlp.{n}", p) for n, p in self.action_mlp.named_params()]
        return out

    @property
    def inv_tau(self):
        return float(np.exp(self.log_inv_tau.data))

    # ------------------------------------------------------------- encoders

    def encode_observation_batch(self, visual, tactile):
        """(B, dv), (B, dt) raw features -> unit embeddings Tensor (B, d)."""
        visual = np.atleast_2d(visual)
        tactile = np.atleast_2d(tactile)
        cfg = self.config
        if cfg.use_vision and visual.shape[1] != self.visual_dim:
            raise ValueError(f"visual dim {visual.shape[1]} != {self.visual_dim}")
        if cfg.use_touch and tactile.shape[1] != self.tactile_dim:
            raise ValueError(f"tactile dim {tactile.shape[1]} != {self.tactile_dim}")
        b, d = visual.shape[0], cfg.embed_dim
        tokens = []
        if cfg.use_touch:
            t_tok = T.add(self.tactile_enc(Tensor(self.tactile_norm.encode(tactile))), self.emb_touch)
            tokens.append(T.reshape(t_tok, (b, 1, d)))
        if cfg.use_vision:
            v_tok = T.add(self.visual_enc(Tensor(self.visual_norm.encode(visual))), self.emb_vision)
            tokens.append(T.reshape(v_tok, (b, 1, d)))
        x = tokens[0] if len(tokens) == 1 else T.concat(tokens, axis=1)
        for layer in self.fusion:
            x = layer(x)
        pooled = T.mean(T.transpose(x), axis=-1)  # average over tokens
        return T.l2norm(self.obs_proj(self.out_ln(pooled)))

    def encode_action_batch(self, actions_norm):
        """(B, H, A) normalized chunks -> unit embeddings Tensor (B, d)."""
        if isinstance(actions_norm, Tensor):
            a = actions_norm
        else:
            a = Tensor(np.asarray(actions_norm, dtype=np.float64))
        if a.shape[1:] != (self.horizon, self.action_dim):
            raise ValueError(f"chunk shape {a.shape[1:]} != {(self.horizon, self.action_dim)}")
        h = T.relu(self.action_conv(T.transpose(a)))  # (B, C, H)
        h = T.reshape(h, (a.shape[0], -1))
        return T.l2norm(self.action_mlp(h))

    def encode_observation(self, visual, tactile):
        with T.no_grad():
            return self.encode_observation_batch(visual, tactile).data[0]

    def encode_action(self, action_raw):
        with T.no_grad():
            a = self.action_norm.encode(np.asarray(action_raw))[None]
            return self.encode_action_batch(a).data[0]

    # --------------------------------------------------------------- scoring

    def score_batch_normalized(self, visual, tactile, actions_norm):
        """Cosine feasibility per row; actions already in normalized space."""
        obs = self.encode_observation_batch(visual, tactile)
        act = self.encode_action_batch(actions_norm)
        return T.sum_(T.mul(obs, act), axis=-1)

    def feasibility_score(self, visual, tactile, action_raw):
        with T.no_grad():
            a = self.action_norm.encode(np.asarray(action_raw))[None]
            s = self.score_batch_normalized(np.atleast_2d(visual), np.atleast_2d(tactile), a)
        return float(s.data[0])

    def grad_batch(self, visual, tactile, actions_norm, time=None):
        """d(score)/d(action) per row in normalized action space.

        The scorer is time-independent; ``time`` is accepted for interface
        compatibility with time-conditioned oracles.
        """
        leaf = Tensor(np.asarray(actions_norm, dtype=np.float64), requires_grad=True)
        with self.frozen():
            total = T.sum_(self.score_batch_normalized(visual, tactile, leaf))
            grads = T.backward(total)
        return grads[leaf.uid].data

    def score_gradient(self, visual, tactile, action_raw):
        """d(score)/d(action) for one raw-space action chunk."""
        a_norm = self.action_norm.encode(np.asarray(action_raw))[None]
        g = self.grad_batch(np.atleast_2d(visual), np.atleast_2d(tactile), a_norm)[0]
        return g / self.action_norm.std


# ----------------------------------------------------------------- training


def infonce_loss(obs_emb, act_emb, inv_tau):
    """Symmetric in-batch contrastive loss over M aligned pairs (Tensors)."""
    m = obs_emb.shape[0]
    if m < 1:
        raise ValueError("need at least one pair")
    sim = T.mul(T.matmul(obs_emb, T.transpose(act_emb)), inv_tau)
    eye = Tensor(np.eye(m))
    diag = T.sum_(T.mul(sim, eye), axis=-1)
    loss_o2a = T.mean(T.sub(T.logsumexp(sim), diag))
    loss_a2o = T.mean(T.sub(T.logsumexp(T.transpose(sim)), diag))
    return T.scale(T.add(loss_o2a, loss_a2o), 0.5)


def contrastive_loss(model, visual, tactile, actions_norm):
    """Loss over one aligned batch; actions pre-corrupted by the caller."""
    obs = model.encode_observation_batch(visual, tactile)
    act = model.encode_action_batch(actions_norm)
    return infonce_loss(obs, act, T.exp(model.log_inv_tau))


def corrupt_actions(actions_norm, levels, family, schedule, flow_steps, rng):
    """Noise chunks to per-row levels the way the matching sampler would."""
    eps = rng.standard_normal(actions_norm.shape)
    if family == "diffusion":
        ab = schedule.alpha_bars[np.asarray(levels)][:, None, None]
        return np.sqrt(ab) * actions_norm + np.sqrt(1.0 - ab) * eps
    ts = np.asarray(levels, dtype=np.float64)[:, None, None] / flow_steps
    return (1.0 - ts) * actions_norm + ts * eps


def _distinct_step_batch(steps, rng, m):
    """Row indices with pairwise-distinct step values (valid negatives)."""
    unique = np.unique(steps)
    chosen = rng.choice(unique, size=min(m, len(unique)), replace=False)
    idx = []
    for s in chosen:
        rows = np.flatnonzero(steps == s)
        idx.append(int(rows[rng.integers(len(rows))]))
    return np.array(idx)


def retrieval_accuracy(model, visual, tactile, actions_norm):
    """Top-1 matched-pair retrieval over a candidate set (both directions)."""
    with T.no_grad():
        obs = model.encode_observation_batch(visual, tactile).data
        act = model.encode_action_batch(actions_norm).data
    sim = obs @ act.T
    o2a = float(np.mean(sim.argmax(axis=1) == np.arange(len(sim))))
    a2o = float(np.mean(sim.argmax(axis=0) == np.arange(len(sim))))
    return 0.5 * (o2a + a2o)


def train_cpm(model, dataset, config, family, schedule=None, geom=None, flow_steps=10):
    """Contrastive training with geometric noise-level augmentation.

    dataset: dict from data.build_chunks. Returns (losses, metrics rows);
    metrics rows are (step, loss, tau, retrieval_accuracy) on a held-back
    probe of corrupted pairs.
    """
    if family == "diffusion" and config.noise_pretrain and schedule is None:
        raise ValueError("diffusion noise pretraining needs a schedule")
    visual, tactile = dataset["visual"], dataset["tactile"]
    chunks, steps = dataset["chunks"], dataset["step"]
    n = len(chunks)
    if n == 0:
        raise ValueError("empty dataset")

    model.visual_norm = Normalizer.fit(visual)
    model.tactile_norm = Normalizer.fit(tactile)
    model.action_norm = Normalizer.fit(chunks)
    acts = model.action_norm.encode(chunks)

    batch_rng = stream(config.seed, "cpm-batches")
    noise_rng = stream(config.seed, "cpm-noise")
    probe_rng = stream(config.seed, "cpm-probe")
    opt = Adam(model.params(), lr=config.lr, warmup=config.warmup)

    probe = probe_rng.choice(n, size=min(128, n), replace=False)
    probe_levels = geom.sample(probe_rng, size=len(probe)) if geom is not None else np.zeros(len(probe), dtype=int)

    losses, metrics = [], []
    for step_no in range(config.steps):
        frac = step_no / max(config.steps - 1, 1)
        opt.lr = config.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        idx = _distinct_step_batch(steps, batch_rng, config.batch_size)
        batch_acts = acts[idx]
        if config.noise_pretrain and geom is not None:
            levels = geom.sample(noise_rng, size=len(idx))
            batch_acts = corrupt_actions(batch_acts, levels, family, schedule, flow_steps, noise_rng)
        loss = contrastive_loss(model, visual[idx], tactile[idx], batch_acts)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"contrastive training diverged at step {step_no}")
        opt.step(T.backward(loss))
        losses.append(value)
        if step_no % config.metrics_every == 0 or step_no == config.steps - 1:
            probe_acts = corrupt_actions(acts[probe], probe_levels, family, schedule, flow_steps,
                                         np.random.default_rng(0)) if config.noise_pretrain and geom is not None else acts[probe]
            acc = retrieval_accuracy(model, visual[probe], tactile[probe], probe_acts)
            metrics.append({"step": step_no, "loss": value, "tau": 1.0 / model.inv_tau,
                            "retrieval": acc})
    return losses, metrics


# ------------------------------------------------------------- persistence


def save_cpm(model, path):
    cfg = model.config
    records = [
        ("config/visual_dim", np.array(float(model.visual_dim))),
        ("config/tactile_dim", np.array(float(model.tactile_dim))),
        ("config/horizon", np.array(float(model.horizon))),
        ("config/action_dim", np.array(float(model.action_dim))),
        ("config/embed_dim", np.array(float(cfg.embed_dim))),
        ("config/layers", np.array(float(cfg.layers))),
        ("config/heads", np.array(float(cfg.heads))),
        ("config/encoder_hidden", np.array(float(cfg.encoder_hidden))),
        ("config/action_channels", np.array(float(cfg.action_channels))),
        ("config/conv_kernel", np.array(float(cfg.conv_kernel))),
        ("config/use_vision", np.array(float(cfg.use_vision))),
        ("config/use_touch", np.array(float(cfg.use_touch))),
        ("norm/visual_mean", model.visual_norm.mean),
        ("norm/visual_std", model.visual_norm.std),
        ("norm/tactile_mean", model.tactile_norm.mean),
        ("norm/tactile_std", model.tactile_norm.std),
        ("norm/action_mean", model.action_norm.mean),
        ("norm/action_std", model.action_norm.std),
    ]
    records += [(f"param/{name}", p.data) for name, p in model.named_params()]
    save_params(path, records)


def load_cpm(path):
    table = dict(load_params(path))
    cfg = CpmConfig(
        embed_dim=int(table["config/embed_dim"]),
        layers=int(table["config/layers"]),
        heads=int(table["config/heads"]),
        encoder_hidden=int(table["config/encoder_hidden"]),
        action_channels=int(table["config/action_channels"]),
        conv_kernel=int(table["config/conv_kernel"]),
        use_vision=bool(table["config/use_vision"]),
        use_touch=bool(table["config/use_touch"]),
    )
    model = CpmModel(
        visual_dim=int(table["config/visual_dim"]),
        tactile_dim=int(table["config/tactile_dim"]),
        horizon=int(table["config/horizon"]),
        action_dim=int(table["config/action_dim"]),
        rng=np.random.default_rng(0),
        config=cfg,
    )
    model.visual_norm = Normalizer(table["norm/visual_mean"], table["norm/visual_std"])
    model.tactile_norm = Normalizer(table["norm/tactile_mean"], table["norm/tactile_std"])
    model.action_norm = Normalizer(table["norm/action_mean"], table["norm/action_std"])
    model.load_named([(k[len("param/"):], v) for k, v in table.items() if k.startswith("param/")])
    return model
