"""Small layer library on top of the tensor engine.

Attention is deliberately a composite of primitive ops (per-head matmuls,
softmax, concat) so its gradients are correct by construction.
"""

import contextlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_params(self):
        raise NotImplementedError

    def params(self):
        return [p for _, p in self.named_params()]

    @contextlib.contextmanager
    def frozen(self):
        """Mark parameters grad-free so tapes track only data inputs."""
        ps = self.params()
        prev = [p.requires_grad for p in ps]
        for p in ps:
            p.requires_grad = False
        try:
            yield
        finally:
            for p, r in zip(ps, prev):
                p.requires_grad = r

    def load_named(self, records):
        """Assign parameter values from an iterable of (name, array)."""
        table = dict(records)
        for name, p in self.named_params():
            if name not in table:
                raise KeyError(f"missing parameter {name!r} in checkpoint")
            p._assign(table[name])

    def zero_weights(self):
        """Zero every weight matrix, leaving biases and norms alone."""
        for name, p in self.named_params():
            if name.endswith(".w"):
                p._assign(np.zeros_like(p.data))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, bias_std=0.0):
        self.w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)
        self.b = None
        if bias:
            b0 = rng.normal(0.0, bias_std, size=n_out) if bias_std > 0 else np.zeros(n_out)
            self.b = Tensor(b0, requires_grad=True)

    def __call__(self, x):
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add(y, self.b)
        return y

    def named_params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layernorm(x, self.gain, self.bias, eps=self.eps)

    def named_params(self):
        return [("gain", self.gain), ("bias", self.bias)]


class MLP(Module):
    """Stack of linears with an activation between them."""

    def __init__(self, dims, rng, activation="relu", final_bias_std=0.0):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   bias_std=final_bias_std if i == len(dims) - 2 else 0.0)
            for i in range(len(dims) - 1)
        ]
        self.act = {"relu": T.relu, "gelu": T.gelu}[activation]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x

    def named_params(self):
        return [(f"l{i}.{n}", p) for i, lay in enumerate(self.layers) for n, p in lay.named_params()]


class MultiHeadSelfAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = [Linear(dim, self.head_dim, rng, bias=False) for _ in range(heads)]
        self.wk = [Linear(dim, self.head_dim, rng, bias=False) for _ in range(heads)]
        self.wv = [Linear(dim, self.head_dim, rng, bias=False) for _ in range(heads)]
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x):
        # x: (B, T, d)
        inv_sqrt = 1.0 / np.sqrt(self.head_dim)
        ctx = []
        for h in range(self.heads):
            q = self.wq[h](x)
            k = self.wk[h](x)
            v = self.wv[h](x)
            scores = T.scale(T.matmul(q, T.transpose(k)), inv_sqrt)
            attn = T.softmax(scores)
            ctx.append(T.matmul(attn, v))
        return self.wo(T.concat(ctx, axis=-1))

    def named_params(self):
        out = []
        for h in range(self.heads):
            out += [(f"h{h}.q.{n}", p) for n, p in self.wq[h].named_params()]
            out += [(f"h{h}.k.{n}", p) for n, p in self.wk[h].named_params()]
            out += [(f"h{h}.v.{n}", p) for n, p in self.wv[h].named_params()]
        out += [(f"o.{n}", p) for n, p in self.wo.named_params()]
        return out


class TransformerLayer(Module):
    """Pre-norm encoder block: attention then a GELU MLP, both residual."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, x):
        x = T.add(x, self.attn(self.ln1(x)))
        h = self.fc2(T.gelu(self.fc1(self.ln2(x))))
        return T.add(x, h)

    def named_params(self):
        out = [(f"ln1.{n}", p) for n, p in self.ln1.named_params()]
        out += [(f"attn.{n}", p) for n, p in self.attn.named_params()]
        out += [(f"ln2.{n}", p) for n, p in self.ln2.named_params()]
        out += [(f"fc1.{n}", p) for n, p in self.fc1.named_params()]
        out += [(f"fc2.{n}", p) for n, p in self.fc2.named_params()]
        return out


class Conv1d(Module):
    """Same-padded 1D convolution, no bias (the MLP after it has one)."""

    def __init__(self, c_in, c_out, kernel, rng):
        fan = c_in * kernel
        self.w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan), size=(c_out, c_in, kernel)), requires_grad=True)

    def __call__(self, x):
        return T.conv1d(x, self.w)

    def named_params(self):
        return [("w", self.w)]


def sinusoidal_features(values, dim, max_period=1000.0):
    """Sin/cos features of scalar inputs; plain numpy, no gradient."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    angles = values[:, None] * freqs[None, :] * max_period
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Adam(Module):
    """Adam with optional linear warmup."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, warmup=0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup = warmup
        self.t = 0
        self.m = {p.uid: np.zeros_like(p.data) for p in self.params}
        self.v = {p.uid: np.zeros_like(p.data) for p in self.params}

    def named_params(self):
        return []

    def step(self, grads):
        self.t += 1
        lr = self.lr
        if self.warmup and self.t <= self.warmup:
            lr *= self.t / self.warmup
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            g = grads.get(p.uid)
            if g is None:
                continue
            g = g.data
            m = self.m[p.uid] = self.b1 * self.m[p.uid] + (1 - self.b1) * g
            v = self.v[p.uid] = self.b2 * self.v[p.uid] + (1 - self.b2) * g * g
            p._assign(p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
