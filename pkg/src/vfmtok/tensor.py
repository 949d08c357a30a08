"""Define-by-run reverse-mode autodiff over numpy arrays.

Each op returns a new :class:`Tensor` holding a backward closure and references
to its parents.  ``Tensor.backward`` walks the graph once in reverse
topological order and accumulates gradients additively, so a tensor used twice
receives the sum of both contributions.

Ops accept leading batch dimensions; the single-example signatures are the
special case with no batch axes.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import sparse

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True
_TAPE = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a backward graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class FrozenTape:
    """Records every stop-gradient value and discrete choice of one forward pass.

    On replay the recorded values are returned in order instead of being
    recomputed.  This turns the loss into the smooth surrogate whose exact
    derivative is what autodiff reports for straight-through and stop-gradient
    ops, which is what a finite-difference check has to compare against.
    """

    def __init__(self):
        self.values = []
        self.replaying = False
        self._pos = 0

    def take(self, value):
        if not self.replaying:
            self.values.append(value)
            return value
        if self._pos >= len(self.values):
            raise ContractError("frozen tape exhausted: replayed graph differs from recorded one")
        value = self.values[self._pos]
        self._pos += 1
        return value

    def rewind(self):
        self.replaying = True
        self._pos = 0


@contextlib.contextmanager
def frozen_tape(tape: FrozenTape):
    global _TAPE
    prev, _TAPE = _TAPE, tape
    if tape.replaying:
        tape._pos = 0
    try:
        yield tape
    finally:
        _TAPE = prev


def tape_value(value):
    """Pass ``value`` through the active tape (identity when none is active)."""
    return _TAPE.take(value) if _TAPE is not None else value


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype) if dtype is not None else np.array(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        topo = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _result(a.data**p, (a,), bw, "pow")


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a: Tensor) -> Tensor:
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * (_GELU_C + (3 * _GELU_C * 0.044715) * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), bw, "gelu")


def silu(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s

    def bw(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _result(out, (a,), bw, "silu")


# -- reductions and shape ---------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) or np.isscalar(i) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, tuple(tensors), bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), bw, "stack")


def split(a: Tensor, sizes, axis: int = -1):
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of extent {a.shape[axis]}")
    out, start = [], 0
    ax = axis % a.ndim
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + s)
        out.append(getitem(a, tuple(sl)))
        start += s
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation and activations over an axis -----------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.reshape(-1, x.shape[-1]).sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _result(out, parents, bw, "layernorm")


def rmsnorm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * r
    out = xhat * gain.data if gain is not None else xhat
    parents = [x] + ([gain] if gain is not None else [])

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = r * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0) if gain.requires_grad else None)
        return tuple(grads)

    return _result(out, parents, bw, "rmsnorm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / (||x|| + eps)`` along ``axis``."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    d = n + eps
    out = x.data / d

    def bw(g):
        gx = (g * x.data).sum(axis=axis, keepdims=True)
        safe_n = np.where(n > 0, n, 1.0)
        return (g / d - x.data * gx / (d * d * safe_n),)

    return _result(out, (x,), bw, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``<a, b> / (|a| |b| + eps)`` along ``axis``."""
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    den = na * nb + eps
    out = dot / den

    def bw(g):
        g = np.expand_dims(g, axis)
        sna = np.where(na > 0, na, 1.0)
        snb = np.where(nb > 0, nb, 1.0)
        ga = gb = None
        if a.requires_grad:
            ga = g * (b.data / den - out * nb * a.data / (sna * den))
        if b.requires_grad:
            gb = g * (a.data / den - out * na * b.data / (snb * den))
        return ga, gb

    return _result(np.squeeze(out, axis=axis), (a, b), bw, "cosine")


# -- losses -----------------------------------------------------------------
def mse(a: Tensor, b) -> Tensor:
    diff = sub(a, b)
    return mean(mul(diff, diff))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = t.shape[0]
    loss = -logp[np.arange(n), t].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


# -- indexing-style ops -----------------------------------------------------
def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def bw(g):
        flat = idx.reshape(-1)
        scatter = sparse.csr_matrix((np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
                                    shape=(table.shape[0], flat.size))
        return (np.asarray(scatter @ g.reshape(-1, table.shape[-1])),)

    return _result(out, (table,), bw, "embedding")


def stop_gradient(x: Tensor) -> Tensor:
    """Value of ``x`` with no backward edge; frozen under an active tape."""
    out = Tensor.__new__(Tensor)
    out.data = tape_value(x.data.copy())
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "stop_gradient"
    out.name = None
    return out


def straight_through(z: Tensor, codes: Tensor) -> Tensor:
    """Forward value ``codes``; backward passes the incoming gradient to ``z`` unchanged."""
    if z.shape != codes.shape:
        raise ShapeError(f"straight_through: z {z.shape} vs codes {codes.shape}")
    delta = tape_value(codes.data - z.data)
    out = codes.data.copy() if _TAPE is None or not _TAPE.replaying else z.data + delta
    return _result(out, (z,), lambda g: (g,), "straight_through")


def dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- attention --------------------------------------------------------------
def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    ``mask`` is a boolean array broadcastable to ``(..., Sq, Sk)``; ``True``
    marks allowed pairs.  Every query row must allow at least one key.
    """
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bw(g):
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, v.shape) if v.requires_grad else None
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        gq = _unbroadcast(ds @ k.data, q.shape) if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(ds, -1, -2) @ q.data, k.shape) if k.requires_grad else None
        return gq, gk, gv

    return _result(out, (q, k, v), bw, "attention")


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# -- spatial ops ------------------------------------------------------------
def bilinear_sample(feat: Tensor, points: Tensor) -> Tensor:
    """Bilinear interpolation of ``feat[..., H, W, C]`` at ``points[..., P, 2]``.

    Points are ``(row, col)`` in continuous pixel coordinates and are clamped
    to ``[0, H-1] x [0, W-1]``.  Differentiable in both the feature values and
    the coordinates; a clamped coordinate gets zero gradient.
    """
    unbatched = feat.ndim == 3
    fd = feat.data[None] if unbatched else feat.data
    pd = points.data[None] if unbatched else points.data
    if pd.shape[-1] != 2 or fd.shape[:-3] != pd.shape[:-2]:
        raise ShapeError(f"bilinear_sample: feat {feat.shape} vs points {points.shape}")
    batch = fd.shape[:-3]
    H, W, C = fd.shape[-3:]
    B = int(np.prod(batch, dtype=np.int64))
    F = fd.reshape(B * H * W, C)
    P = pd.shape[-2]
    pts = pd.reshape(B, P, 2)

    r = np.clip(pts[..., 0], 0.0, H - 1)
    c = np.clip(pts[..., 1], 0.0, W - 1)
    # non-finite coordinates index cell 0 but keep NaN weights, so NaN propagates
    r0 = np.minimum(np.floor(np.nan_to_num(r)).astype(np.int64), max(H - 2, 0))
    c0 = np.minimum(np.floor(np.nan_to_num(c)).astype(np.int64), max(W - 2, 0))
    fr = (r - r0).astype(fd.dtype)
    fc = (c - c0).astype(fd.dtype)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    base = (np.arange(B) * H * W)[:, None]
    i00 = (base + r0 * W + c0).reshape(-1)
    i01 = (base + r0 * W + c1).reshape(-1)
    i10 = (base + r1 * W + c0).reshape(-1)
    i11 = (base + r1 * W + c1).reshape(-1)
    fr_ = fr.reshape(-1, 1)
    fc_ = fc.reshape(-1, 1)
    w00 = (1 - fr_) * (1 - fc_)
    w01 = (1 - fr_) * fc_
    w10 = fr_ * (1 - fc_)
    w11 = fr_ * fc_
    v00, v01, v10, v11 = F[i00], F[i01], F[i10], F[i11]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out_shape = (P, C) if unbatched else batch + (P, C)

    def bw(g):
        g2 = g.reshape(-1, C)
        gf = gp = None
        if feat.requires_grad:
            n = g2.shape[0]
            scatter = sparse.csr_matrix(
                (np.concatenate([w00, w01, w10, w11]).reshape(-1),
                 (np.concatenate([i00, i01, i10, i11]), np.tile(np.arange(n), 4))),
                shape=(F.shape[0], n))
            gf = np.asarray(scatter @ g2).reshape(feat.shape)
        if points.requires_grad:
            dr = ((1 - fc_) * (v10 - v00) + fc_ * (v11 - v01)) * g2
            dc = ((1 - fr_) * (v01 - v00) + fr_ * (v11 - v10)) * g2
            inside_r = ((pts[..., 0] >= 0) & (pts[..., 0] <= H - 1)).reshape(-1)
            inside_c = ((pts[..., 1] >= 0) & (pts[..., 1] <= W - 1)).reshape(-1)
            if H == 1:
                inside_r[:] = False
            if W == 1:
                inside_c[:] = False
            gp = np.stack([dr.sum(-1) * inside_r, dc.sum(-1) * inside_c], axis=-1).reshape(points.shape)
        return gf, gp

    return _result(out.reshape(out_shape), (feat, points), bw, "bilinear_sample")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution, channels-last: ``x[B,H,W,Cin]``, ``weight[kh,kw,Cin,Cout]``."""
    B, H, W, Cin = x.shape
    kh, kw, wc, Cout = weight.shape
    if wc != Cin:
        raise ShapeError(f"conv2d: input channels {Cin} vs weight {weight.shape}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,H,W,Cin,kh,kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, kh * kw * Cin)
    w2 = weight.data.reshape(kh * kw * Cin, Cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    parents = (x, weight) + ((bias,) if bias is not None else ())

    def bw(g):
        g2 = g.reshape(B * H * W, Cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(B, H, W, kh, kw, Cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + H, j : j + W, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, ph : ph + H, pw : pw + W, :]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _result(out.reshape(B, H, W, Cout), parents, bw, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of ``x[B,H,W,C]`` by an integer factor."""
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(B, H, factor, W, factor, C).sum(axis=(2, 4)),)

    return _result(out, (x,), bw, "upsample")
