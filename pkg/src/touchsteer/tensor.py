"""Dense float64 tensors with reverse-mode autodiff.

Just enough machinery to train the small networks in this package and to
differentiate the feasibility score with respect to an action chunk at
sampling time. Values are immutable once created; every op that sees a
``requires_grad`` input records itself so ``backward`` can replay the tape
in reverse creation order (creation order is a topological order by
construction).

Broadcasting is restricted to leading-dimension batch: a lower-rank operand
must match the trailing dimensions of the other exactly.
"""

import contextlib
import itertools

import numpy as np

from . import _kernels

_uid = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; useful for pure-inference forward passes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "uid", "op", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid)
        self.op = "leaf"
        self._parents = ()
        self._vjps = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data)

    def _assign(self, data):
        """Replace the value of a leaf parameter (optimizer use only)."""
        if self._parents:
            raise ValueError("cannot assign to a non-leaf tensor")
        arr = np.asarray(data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ValueError(f"assign: shape {arr.shape} != {self.data.shape}")
        # ascontiguousarray would promote 0-d to (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjps, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out.uid = next(_uid)
    out.op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    else:
        out._parents = ()
        out._vjps = ()
    return out


def _check_broadcast(op, a, b):
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------- basic ops


def add(a, b):
    _check_broadcast("add", a, b)
    return _node(
        a.data + b.data,
        (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)),
        "add",
    )


def sub(a, b):
    _check_broadcast("sub", a, b)
    return _node(
        a.data - b.data,
        (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    _check_broadcast("mul", a, b)
    return _node(
        a.data * b.data,
        (a, b),
        (
            lambda g: _reduce_to(g * b.data, a.shape),
            lambda g: _reduce_to(g * a.data, b.shape),
        ),
        "mul",
    )


def scale(a, c):
    c = float(c)
    return _node(a.data * c, (a,), (lambda g: g * c,), "scale")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), (lambda g: g * out,), "exp")


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ValueError(f"matmul: need 2D or 3D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul: batch mismatch {a.shape} and {b.shape}")
    out = _kernels.active.matmul(a.data, b.data)

    def grad_a(g):
        bt = np.ascontiguousarray(np.swapaxes(b.data, -1, -2))
        return _reduce_to(_kernels.active.matmul(g, bt), a.shape)

    def grad_b(g):
        at = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
        return _reduce_to(_kernels.active.matmul(at, g), b.shape)

    return _node(out, (a, b), (grad_a, grad_b), "matmul")


def transpose(a):
    if a.ndim < 2:
        raise ValueError(f"transpose: need at least 2D, got {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _node(out, (a,), (lambda g: np.ascontiguousarray(np.swapaxes(g, -1, -2)),), "transpose")


def reshape(a, shape):
    out = np.ascontiguousarray(a.data).reshape(shape)
    return _node(out, (a,), (lambda g: g.reshape(a.shape),), "reshape")


def concat(tensors, axis=-1):
    if not tensors:
        raise ValueError("concat: no inputs")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: np.ascontiguousarray(g[sl])

    return _node(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))), "concat")


def _sum_mean(a, axis, op):
    if axis not in (None, -1):
        raise ValueError(f"{op}: axis must be None or -1")
    if op == "sum":
        out = a.data.sum(axis=axis)
    else:
        out = a.data.mean(axis=axis)
    denom = a.data.size if axis is None else a.shape[-1]
    factor = 1.0 if op == "sum" else 1.0 / denom

    def vjp(g):
        if axis is None:
            return np.full(a.shape, float(g) * factor)
        return np.broadcast_to((g * factor)[..., None], a.shape).copy()

    return _node(np.asarray(out), (a,), (vjp,), op)


def sum_(a, axis=None):
    return _sum_mean(a, axis, "sum")


def mean(a, axis=None):
    return _sum_mean(a, axis, "mean")


# ----------------------------------------------------------- kernel-backed


def relu(a):
    return _node(
        _kernels.active.relu(a.data),
        (a,),
        (lambda g: _kernels.active.relu_grad(a.data, g),),
        "relu",
    )


def gelu(a):
    return _node(
        _kernels.active.gelu(a.data),
        (a,),
        (lambda g: _kernels.active.gelu_grad(a.data, g),),
        "gelu",
    )


def softmax(a):
    y = _kernels.active.softmax(a.data)
    return _node(y, (a,), (lambda g: _kernels.active.softmax_grad(y, g),), "softmax")


def logsumexp(a):
    z = _kernels.active.logsumexp(a.data)
    return _node(z, (a,), (lambda g: _kernels.active.logsumexp_grad(a.data, z, g),), "logsumexp")


def layernorm(x, gain, bias, eps=1e-5):
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(
            f"layernorm: gain/bias {gain.shape}/{bias.shape} must match last dim of {x.shape}"
        )
    y, mu, rstd = _kernels.active.layernorm(x.data, gain.data, bias.data, eps)
    memo = []

    def all_grads(g):
        if not (memo and memo[0][0] is g):
            memo[:] = [(g, _kernels.active.layernorm_grad(x.data, gain.data, mu, rstd, g))]
        return memo[0][1]

    return _node(
        y,
        (x, gain, bias),
        (
            lambda g: all_grads(g)[0],
            lambda g: all_grads(g)[1],
            lambda g: all_grads(g)[2],
        ),
        "layernorm",
    )


def l2norm(a, eps=1e-12):
    y, denom = _kernels.active.l2norm(a.data, eps)
    return _node(y, (a,), (lambda g: _kernels.active.l2norm_grad(y, denom, g),), "l2norm")


def conv1d(x, w):
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d: need x (B,Cin,L) and w (Cout,Cin,k), got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d: channel mismatch {x.shape} and {w.shape}")
    if w.shape[2] % 2 != 1:
        raise ValueError(f"conv1d: kernel size must be odd, got {w.shape[2]}")
    memo = []

    def all_grads(g):
        if not (memo and memo[0][0] is g):
            memo[:] = [(g, _kernels.active.conv1d_grad(x.data, w.data, g))]
        return memo[0][1]

    out = _kernels.active.conv1d(x.data, w.data)
    return _node(out, (x, w), (lambda g: all_grads(g)[0], lambda g: all_grads(g)[1]), "conv1d")


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "sum": sum_,
    "mean": mean,
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "layernorm": layernorm,
    "l2norm": l2norm,
    "conv1d": conv1d,
}


def apply(op_kind, *inputs, **kwargs):
    """Dispatch an op by name; inputs are Tensors (plus op-specific kwargs)."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ autodiff


def backward(output):
    """Reverse accumulation from a scalar output.

    Returns a map ``{leaf.uid: Tensor}`` holding d(output)/d(leaf) for every
    reachable leaf with ``requires_grad``.
    """
    if output.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("backward on a detached tensor (no tape recorded)")

    nodes = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.uid in nodes:
            continue
        nodes[node.uid] = node
        stack.extend(node._parents)

    grads = {output.uid: np.ones(output.data.shape)}
    result = {}
    for uid in sorted(nodes, reverse=True):
        node = nodes[uid]
        g = grads.pop(uid, None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                result[uid] = Tensor(g)
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            acc = grads.get(parent.uid)
            grads[parent.uid] = contrib if acc is None else acc + contrib
    return result


def grad_check(function, point, step=1e-5):
    """Max relative error between autodiff and central differences.

    ``function`` maps a Tensor to a scalar Tensor; ``point`` gives the
    evaluation point. Error per coordinate is
    |autodiff - central| / (|central| + 1e-12).
    """
    x = Tensor(point.data if isinstance(point, Tensor) else point, requires_grad=True)
    out = function(x)
    if out.data.size != 1:
        raise ValueError("grad_check: function must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    auto = backward(out)[x.uid].data

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(function(Tensor(x.data)).data)
        flat[i] = orig - step
        lo = float(function(Tensor(x.data)).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError("grad_check: non-finite intermediate")
        fd = (hi - lo) / (2.0 * step)
        err = abs(auto.ravel()[i] - fd) / (abs(fd) + 1e-12)
        worst = max(worst, err)
    return worst
