"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the output remembers its parents and a backward closure; the
reverse traversal is materialised as a :class:`Tape` at ``backward`` time.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        return backward(self)


def _raise_nonscalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a, p):
    a = as_tensor(a)
    p = float(p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, (a,), bw, "pow")


def sqrt(a):
    return power(a, 0.5)


def log(a):
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw, "log")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw, "exp")


def clip(a, lo=None, hi=None):
    """Clamp to [lo, hi]; gradient passes only where the input is strictly inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bw(g):
        return (g * inside,)

    return _make(out, (a,), bw, "clip")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0  # derivative at exactly 0 is 0

    def bw(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bw, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _make(a.data * cdf, (a,), bw, "gelu")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bw, "tanh")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[ax] for ax in axes]))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def bw(g):
        return (_expand(g, a.shape, axis, keepdims),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = _count(a.shape, axis)

    def bw(g):
        return (_expand(g, a.shape, axis, keepdims) / n,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw, "mean_axis")


def var(a, axis=None, keepdims=False):
    """Population (biased) variance."""
    a = as_tensor(a)
    n = _count(a.shape, axis)
    centered = a.data - a.data.mean(axis=axis, keepdims=True)

    def bw(g):
        return (_expand(g, a.shape, axis, keepdims) * (2.0 / n) * centered,)

    return _make((centered ** 2).mean(axis=axis, keepdims=keepdims), (a,), bw, "var_axis")


def l1_norm(a):
    a = as_tensor(a)

    def bw(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data).sum(), (a,), bw, "l1_norm")


def sq_frobenius(a):
    a = as_tensor(a)

    def bw(g):
        return (2.0 * g * a.data,)

    return _make((a.data * a.data).sum(), (a,), bw, "sq_frobenius")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def upsample2x(a):
    """Nearest-neighbour 2x spatial up-sampling of an NCHW tensor."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ValueError(f"upsample2x: expected NCHW input, got shape {a.shape}")
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        n, c, h, w = a.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (a,), bw, "upsample2x")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def _im2col(xp, k, stride, ho, wo):
    """(N, C, Hp, Wp) -> contiguous (N*Ho*Wo, C*k*k) patch matrix."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation. x: (N, C, H, W); w: (O, C, k, k); zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return _make(out, (x, w), bw, "conv2d")


def batch_norm(x, eps):
    """Per-channel standardisation with batch statistics.

    Works on (N, C) or (N, C, H, W) inputs. Returns ``(xhat, mean, var)``;
    the statistics are plain arrays for running-average bookkeeping.
    """
    x = as_tensor(x)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    m = _count(x.shape, axes)
    if m < 2:
        raise ValueError(f"batch_norm: need at least 2 values per channel, got input {x.shape}")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    v = (centered ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = centered * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = _make(xhat, (x,), bw, "batch_norm")
    return out, mu.reshape(-1), v.reshape(-1)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor


@dataclass
class Tape:
    """Nodes in topological order: every node's inputs precede it."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p._backward is not None and id(p) not in seen:
                    stack.append((p, False))
        nodes = [TapeNode(t.op, t._parents, t) for t in order if t._backward is not None]
        return cls(nodes)


def backward(root, tape=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    root = as_tensor(root)
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if root._backward is None:
        if root.requires_grad:
            root.grad = np.ones(root.shape) if root.grad is None else root.grad + 1.0
        return Tape()
    tape = tape or Tape.from_root(root)
    grads = {id(root): np.ones(root.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for parent, pg in zip(node.inputs, node.output._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent._backward is None:
                parent.grad = np.array(pg, dtype=np.float64) if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    return tape


def finite_diff_check(f, x, step=1e-5):
    """Max relative discrepancy between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. ``x`` is a Tensor or array; its
    data is perturbed in place and restored.
    """
    x = as_tensor(x)
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("finite_diff_check: f is not finite at x")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
    base = x.data.copy()
    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(base)).item()
            flat[i] = orig - step
            fm = f(Tensor(base)).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"finite_diff_check: f not finite near coordinate {i}")
            numeric[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
