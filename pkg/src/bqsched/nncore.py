"""A small reverse-mode autodiff over numpy float64 arrays.

Only what the scheduler networks need: broadcasting arithmetic, matmul,
tanh/exp/log, reductions, reshapes, concatenation, gathers, masked
(log-)softmax, set-level normalization, multi-head attention, MLPs and Adam.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

MASK_VALUE = -1e8
CHECKPOINT_VERSION = 1

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.value)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar ------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(as_tensor(o), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(value, parents, backward_fn, requires_grad=True)
    return Tensor(value)


def param(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)))


def power(a, p: float):
    a = as_tensor(a)
    return _node(a.value ** p, (a,), lambda g: (g * p * a.value ** (p - 1),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.value @ b.value
    if b.ndim == 2:
        def bw(g):
            ga = g @ b.value.T
            gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def bw(g):
            ga = g @ np.swapaxes(b.value, -1, -2)
            gb = np.swapaxes(a.value, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _node(out, (a, b), bw)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _node(np.broadcast_to(a.value, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def index(a, idx):
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros_like(a.value)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _node(a.value[idx], (a,), bw)


def where(mask, a, fill: float):
    """Entries where ``mask`` is False are replaced by the constant ``fill``."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    return _node(np.where(mask, a.value, fill), (a,), lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value
    return _node(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def clip(a, lo: float, hi: float):
    a = as_tensor(a)
    inside = (a.value > lo) & (a.value < hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    sm = np.exp(out)
    return _node(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def masked_log_softmax(logits, mask, axis=-1):
    """Disallowed entries get the logit ``MASK_VALUE`` before normalizing."""
    return log_softmax(where(mask, logits, MASK_VALUE), axis=axis)


# --------------------------------------------------------------------------
# composite layers
# --------------------------------------------------------------------------


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mlp(x, params, prefix: str, depth: int, head: bool = False):
    """``depth`` repetitions of tanh∘linear; with ``head`` the last layer is
    left linear so outputs are unbounded."""
    for layer in range(depth):
        x = linear(x, params[f"{prefix}.{layer}.w"], params[f"{prefix}.{layer}.b"])
        if not (head and layer == depth - 1):
            x = tanh(x)
    return x


def set_norm(x, gain, bias, eps=1e-5, axis=-2):
    """Normalize each feature across the set (row) axis of one sample."""
    mu = tmean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=axis, keepdims=True)
    return add(mul(mul(xc, power(add(var, eps), -0.5)), gain), bias)


def multi_head_attention(x, params, prefix: str, heads: int, key_mask=None):
    """Unmasked scaled dot-product attention over the rows of ``x`` (B, L, d).

    ``key_mask`` (B, L) marks valid rows; invalid keys receive no attention.
    """
    bsz, length, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (bsz, length, heads, dh)), (0, 2, 1, 3))

    q = split(matmul(x, params[f"{prefix}.wq"]))
    k = split(matmul(x, params[f"{prefix}.wk"]))
    v = split(matmul(x, params[f"{prefix}.wv"]))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if key_mask is not None:
        scores = where(np.asarray(key_mask, dtype=bool)[:, None, None, :], scores, MASK_VALUE)
    att = softmax(scores, axis=-1)
    out = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (bsz, length, d))
    return linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def cross_entropy(logits, target, mask=None):
    """Mean negative log-likelihood of integer ``target`` rows."""
    logp = log_softmax(logits) if mask is None else masked_log_softmax(logits, mask)
    rows = np.arange(logits.shape[0])
    return mul(tsum(index(logp, (rows, np.asarray(target)))), -1.0 / logits.shape[0])


def mse(pred, target):
    diff = sub(pred, np.asarray(target, dtype=np.float64))
    return tmean(mul(diff, diff))


def kl_divergence(p_ref, logq, mask=None):
    """Row-wise KL(p_ref || q) summed over the last axis; ``p_ref`` is a
    constant array, ``logq`` a tensor of log-probabilities."""
    p_ref = np.asarray(p_ref, dtype=np.float64)
    if mask is not None:
        p_ref = np.where(mask, p_ref, 0.0)
    with np.errstate(divide="ignore"):
        logp = np.where(p_ref > 0, np.log(np.where(p_ref > 0, p_ref, 1.0)), 0.0)
    return tsum(mul(sub(logp, logq), p_ref), axis=-1)


# --------------------------------------------------------------------------
# parameters, initialization, optimizer, checkpoints
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    hidden_dim: int = 64
    attn_layers: int = 2
    attn_heads: int = 4
    depth_query: int = 2    # single-query representation
    depth_global: int = 2   # global state representation
    depth_final: int = 2    # per-query final representation
    depth_policy: int = 2
    depth_value: int = 2
    depth_aux: int = 2
    depth_gain: int = 2
    depth_clf: int = 2
    depth_reg: int = 2
    norm: str = "set"       # "set" or "none"

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("depth_") and getattr(self, f.name) < 1:
                raise ShapeError(f"{f.name} must be >= 1")
        if self.hidden_dim % self.attn_heads:
            raise ShapeError("hidden_dim must be divisible by attn_heads")
        if self.norm not in ("set", "none"):
            raise ShapeError(f"unknown norm {self.norm!r}")


class ParamStore(dict):
    """Named parameter tensors with deterministic Glorot-uniform init."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.rng = np.random.default_rng(seed)

    def glorot(self, name, fan_in, fan_out, shape=None):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        self[name] = param(self.rng.uniform(-lim, lim, size=shape or (fan_in, fan_out)))
        return self[name]

    def zeros(self, name, shape):
        self[name] = param(np.zeros(shape))
        return self[name]

    def ones(self, name, shape):
        self[name] = param(np.ones(shape))
        return self[name]

    def add_mlp(self, prefix, d_in, d_hidden, d_out, depth):
        dims = [d_in] + [d_hidden] * (depth - 1) + [d_out]
        for layer in range(depth):
            self.glorot(f"{prefix}.{layer}.w", dims[layer], dims[layer + 1])
            self.zeros(f"{prefix}.{layer}.b", (dims[layer + 1],))

    def add_attention(self, prefix, d):
        for k in ("wq", "wk", "wv", "wo"):
            self.glorot(f"{prefix}.{k}", d, d)
        self.zeros(f"{prefix}.bo", (d,))

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def subset(self, prefixes) -> dict:
        return {k: v for k, v in self.items() if k.startswith(tuple(prefixes))}

    def state_dict(self) -> dict:
        return {k: v.value.copy() for k, v in self.items()}

    def load_state_dict(self, state: dict):
        missing = set(self) - set(state)
        if missing:
            raise DataError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise DataError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.value = arr.copy()

    def copy_values(self) -> dict:
        return self.state_dict()


def save_checkpoint(path, params: ParamStore, **meta):
    arrays = {f"p/{k}": v.value for k, v in params.items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    for k, v in meta.items():
        arrays[f"m/{k}"] = np.asarray(v)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, params: ParamStore) -> dict:
    with np.load(Path(path)) as data:
        if "__version__" not in data or int(data["__version__"]) != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version")
        params.load_state_dict({k[2:]: data[k] for k in data.files if k.startswith("p/")})
        return {k[2:]: data[k] for k in data.files if k.startswith("m/")}


class Adam:
    def __init__(self, params: dict, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in self.params.items()}
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.max_grad_norm:
                grads = {k: g * (self.max_grad_norm / norm) for k, g in grads.items()}
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.value = p.value - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def _rel_err(ga, gf):
    # the floor keeps exactly-zero gradients (e.g. a bias feeding a set norm)
    # from turning finite-difference roundoff into a large ratio
    return np.abs(ga - gf) / np.maximum(1e-6, np.abs(ga) + np.abs(gf))


def grad_check(f, x, eps=1e-5) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    xt = param(x)
    f(xt).backward()
    ga = xt.grad if xt.grad is not None else np.zeros_like(x)
    gf = np.zeros_like(x)
    with no_grad():
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            gf[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * eps)
    return float(_rel_err(ga, gf).max()) if x.size else 0.0


def grad_check_params(loss_fn, params: dict, eps=1e-5, max_coords=6, seed=0) -> dict:
    """Finite-difference check of ``loss_fn()`` against every tensor in
    ``params`` on up to ``max_coords`` random coordinates per tensor.

    Returns ``{name: max_relative_error}``.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
    out = {}
    with no_grad():
        for name, p in params.items():
            flat = p.value.reshape(-1)
            coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
            errs = []
            for c in coords:
                old = flat[c]
                flat[c] = old + eps
                up = loss_fn().item()
                flat[c] = old - eps
                down = loss_fn().item()
                flat[c] = old
                gf = (up - down) / (2 * eps)
                errs.append(_rel_err(analytic[name].reshape(-1)[c], gf))
            out[name] = float(max(errs))
    return out
