"""L2-normalized vector quantization with straight-through gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import Linear, Module, param
from .rng import Rng
from .tensor import Tensor, stop_gradient, straight_through, tape_value


class Codebook(Module):
    """Code table plus the down/up projections between query width and code width."""

    def __init__(self, size: int, dim: int, query_dim: int, rng: Rng, out_dim: int | None = None):
        if size < 1:
            raise ConfigError("codebook must contain at least one vector")
        self.vectors = param(rng.normal((size, dim)))
        self.in_proj = Linear(query_dim, dim, rng)
        self.out_proj = Linear(dim, query_dim if out_dim is None else out_dim, rng)
        self.usage_counts = np.zeros(size, dtype=np.int64)
        self.training = True

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def reset_usage(self):
        self.usage_counts[:] = 0


def nearest_indices(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Row-wise argmin of squared Euclidean distance; ties go to the smallest index."""
    d = ((z[:, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def quantize(cb: Codebook, z: Tensor):
    """Map L2-normalized ``z[..., D]`` to nearest normalized codes.

    Returns ``(indices, codes)``; ``codes`` is differentiable with respect to
    the codebook vectors through the normalization.  Counts usage when the
    codebook is not in training mode.
    """
    if cb.size == 0:
        raise ConfigError("empty codebook")
    D = cb.vectors.shape[1]
    if z.shape[-1] != D:
        raise ShapeError(f"quantize: input width {z.shape[-1]} != code width {D}")
    normed = T.l2_normalize(cb.vectors)
    flat = z.data.reshape(-1, D)
    idx = tape_value(nearest_indices(flat, normed.data)).reshape(z.shape[:-1])
    if not cb.training:
        np.add.at(cb.usage_counts, idx.reshape(-1), 1)
    codes = T.embedding(normed, idx)
    return idx, codes


def dequantize(cb: Codebook, indices) -> Tensor:
    """Normalized code vectors for ``indices``, projected back to query width."""
    normed = T.l2_normalize(cb.vectors)
    return cb.out_proj(T.embedding(normed, np.asarray(indices)))


def vq_loss(z: Tensor, codes: Tensor, beta: float = 0.25) -> Tensor:
    """``mean_tokens ||sg(z) - c||^2 + beta * ||sg(c) - z||^2``."""
    if beta < 0:
        raise ContractError("beta must be non-negative")
    book = T.mean(T.tsum((stop_gradient(z) - codes) ** 2, axis=-1))
    commit = T.mean(T.tsum((z - stop_gradient(codes)) ** 2, axis=-1))
    return book + beta * commit


def codebook_usage(cb: Codebook) -> float:
    """Fraction of codes selected at least once since the last reset."""
    if cb.usage_counts.sum() == 0:
        raise ContractError("codebook usage undefined: no assignments accumulated")
    return float((cb.usage_counts > 0).mean())


class QuantizerOutput:
    __slots__ = ("z", "indices", "codes", "quantized", "loss")

    def __init__(self, z, indices, codes, quantized, loss):
        self.z = z
        self.indices = indices
        self.codes = codes
        self.quantized = quantized
        self.loss = loss


def quantize_tokens(cb: Codebook, tokens: Tensor, beta: float = 0.25) -> QuantizerOutput:
    """Full quantizer path: project, normalize, look up, straight-through, project back."""
    z = T.l2_normalize(cb.in_proj(tokens))
    idx, codes = quantize(cb, z)
    q = straight_through(z, codes)
    return QuantizerOutput(z, idx, codes, cb.out_proj(q), vq_loss(z, codes, beta))
