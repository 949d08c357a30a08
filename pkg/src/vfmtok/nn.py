"""Parameter containers and the transformer building blocks shared by all models."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Module:
    """Walks its attributes (Tensors, Modules, lists of Modules) in definition order."""

    def named_tensors(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_tensors(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def named_parameters(self, prefix: str = ""):
        seen = set()
        for name, t in self.named_tensors(prefix):
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                yield name, t

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.grad = None

    def astype(self, dtype):
        """Cast every tensor in place (used to run float64 gradient checks)."""
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self

    def state_dict(self):
        out, seen = {}, set()
        for name, t in self.named_tensors():
            if id(t) not in seen:
                seen.add(id(t))
                out[name] = t.data
        return out

    def load_state_dict(self, state, strict: bool = True):
        from .errors import FormatError

        mine = dict(self.named_tensors())
        if strict:
            missing = [k for k in mine if k not in state]
            unexpected = [k for k in state if k not in mine]
            if missing or unexpected:
                raise FormatError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, t in mine.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != t.data.shape:
                    raise FormatError(f"state entry {k}: shape {arr.shape} != {t.data.shape}")
                t.data = arr.astype(t.data.dtype).copy()


def param(data, dtype=np.float32, trainable: bool = True) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=trainable)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, std: float | None = None,
                 trainable: bool = True):
        std = (1.0 / np.sqrt(d_in)) if std is None else std
        self.weight = param(rng.normal((d_in, d_out), std), trainable=trainable)
        self.bias = param(np.zeros(d_out), trainable=trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, trainable: bool = True):
        self.gain = param(np.ones(dim), trainable=trainable)
        self.bias = param(np.zeros(dim), trainable=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias)


class MLP(Module):
    """Two linear maps with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: Rng, trainable: bool = True,
                 out_std: float | None = None):
        self.fc1 = Linear(d_in, d_hidden, rng, trainable=trainable)
        self.fc2 = Linear(d_hidden, d_out, rng, trainable=trainable, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, S, D = x.shape
    x = x.reshape(tuple(lead) + (S, heads, D // heads))
    n = x.ndim
    return T.swapaxes(x, n - 3, n - 2)


def merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    x = T.swapaxes(x, n - 3, n - 2)
    *lead, S, H, d = x.shape
    return x.reshape(tuple(lead) + (S, H * d))


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng, trainable: bool = True, out_std: float | None = None):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, trainable=trainable)
        self.proj = Linear(dim, dim, rng, trainable=trainable, std=out_std)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        D = x.shape[-1]
        q, k, v = T.split(self.qkv(x), [D, D, D], axis=-1)
        h = T.attention(split_heads(q, self.heads), split_heads(k, self.heads), split_heads(v, self.heads), mask)
        return self.proj(merge_heads(h))


class Block(Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, dim: int, heads: int, rng: Rng, mlp_ratio: int = 2, trainable: bool = True,
                 residual_std: float | None = None):
        self.ln1 = LayerNorm(dim, trainable=trainable)
        self.attn = SelfAttention(dim, heads, rng, trainable=trainable, out_std=residual_std)
        self.ln2 = LayerNorm(dim, trainable=trainable)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng, trainable=trainable, out_std=residual_std)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))
