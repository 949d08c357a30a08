"""Region-adaptive tokenization: grid anchor queries refined by deformable cross-attention."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .encoder import MultiLevelFeatures
from .errors import ConfigError, ShapeError
from .nn import MLP, LayerNorm, Linear, Module, SelfAttention, param, split_heads, merge_heads
from .rng import Rng
from .tensor import Tensor


def grid_reference_points(count: int) -> np.ndarray:
    """Cell centres of a ``sqrt(count)`` square lattice in normalized ``(row, col)``."""
    side = math.isqrt(count)
    if side * side != count:
        raise ConfigError(f"anchor count {count} is not a perfect square")
    c = (np.arange(side) + 0.5) / side
    rr, cc = np.meshgrid(c, c, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=-1)


def star_offsets(n_points: int, radius: float = 1.0) -> np.ndarray:
    """``n_points`` directions evenly spread on a circle, in grid cells, as ``[K, 2]``."""
    ang = 2 * np.pi * np.arange(n_points) / n_points
    return np.round(radius * np.stack([np.sin(ang), np.cos(ang)], axis=-1), 12)


class AnchorQueries(Module):
    def __init__(self, count: int, query_dim: int, rng: Rng):
        self.count = count
        self.content = param(rng.normal((count, query_dim), 0.02))
        self.reference_points = param(grid_reference_points(count), trainable=False)


def level_stack(feats: MultiLevelFeatures) -> Tensor:
    """``[B, L, H, W, C]`` from the per-level list."""
    return T.stack(feats.levels, axis=1)


def _pixel_coords(ref: np.ndarray, grid) -> np.ndarray:
    H, W = grid
    return ref * np.array([H, W]) - 0.5


class DeformLayer(Module):
    """One refinement layer: deformable multi-level sampling, query self-attention, FFN."""

    def __init__(self, dim: int, n_levels: int, n_points: int, heads: int, rng: Rng, star_radius: float = 1.0):
        self.n_levels = n_levels
        self.n_points = n_points
        self.ln_cross = LayerNorm(dim)
        self.offset = Linear(dim, n_levels * n_points * 2, rng)
        self.offset.weight.data[:] = 0.0
        star = star_offsets(n_points, star_radius)
        self.offset.bias.data[:] = np.tile(star[None], (n_levels, 1, 1)).reshape(-1)
        self.attn_weights = Linear(dim, n_levels * n_points, rng)
        self.attn_weights.weight.data[:] = 0.0
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng, std=0.5 / np.sqrt(dim))
        self.ln_self = LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads, rng, out_std=0.5 / np.sqrt(dim))
        self.ln_ff = LayerNorm(dim)
        self.ffn = MLP(dim, 2 * dim, dim, rng, out_std=0.5 / np.sqrt(dim))

    def sample(self, queries: Tensor, ref: np.ndarray, stacked: Tensor):
        """Aggregated deformable samples ``[B, T, C]`` and sampling locations ``[B, T, L, K, 2]``.

        ``stacked`` holds the levels as ``[B, L, H, W, C]``; locations are in
        pixel coordinates of that grid.
        """
        L, K = self.n_levels, self.n_points
        if stacked.shape[1] != L:
            raise ConfigError(f"layer built for {L} levels, got {stacked.shape[1]}")
        B, Tq, C = queries.shape
        H, W = stacked.shape[2:4]
        h = self.ln_cross(queries)
        off = self.offset(h).reshape(B, Tq, L, K, 2)
        base = _pixel_coords(ref, (H, W)).astype(queries.dtype)[None, :, None, None, :]
        loc = off + base
        vals = self.value(stacked)
        pts = T.transpose(loc, (0, 2, 1, 3, 4)).reshape(B, L, Tq * K, 2)
        samples = T.bilinear_sample(vals, pts)  # B,L,Tq*K,C
        samples = T.transpose(samples.reshape(B, L, Tq, K, C), (0, 2, 1, 3, 4)).reshape(B, Tq, L * K, C)
        w = T.softmax(self.attn_weights(h), axis=-1).reshape(B, Tq, L * K, 1)
        agg = T.tsum(w * samples, axis=2)
        return agg, loc

    def __call__(self, queries: Tensor, ref: np.ndarray, stacked: Tensor) -> Tensor:
        agg, _ = self.sample(queries, ref, stacked)
        q = queries + self.out(agg)
        q = q + self.self_attn(self.ln_self(q))
        return q + self.ffn(self.ln_ff(q))


def deform_attend(layer: DeformLayer, queries: Tensor, ref: np.ndarray, feats: MultiLevelFeatures) -> Tensor:
    return layer(queries, ref, level_stack(feats))


def window_mask(ref: np.ndarray, grid, window: int) -> np.ndarray:
    """``[T, H*W]`` boolean mask of feature cells inside each query's square window."""
    H, W = grid
    half = window // 2
    centre = np.floor(ref * np.array([H, W])).astype(int)
    rows = np.arange(H)[None, :, None]
    cols = np.arange(W)[None, None, :]
    inside = (np.abs(rows - centre[:, 0, None, None]) <= half) & (np.abs(cols - centre[:, 1, None, None]) <= half)
    return inside.reshape(len(ref), H * W)


class WindowedCrossLayer(Module):
    """Ablation path: dense cross-attention restricted to a window around each reference cell."""

    def __init__(self, dim: int, heads: int, window: int, rng: Rng):
        self.heads = heads
        self.window = window
        self.ln_cross = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(dim, 2 * dim, rng)
        self.out = Linear(dim, dim, rng, std=0.5 / np.sqrt(dim))
        self.ln_self = LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads, rng, out_std=0.5 / np.sqrt(dim))
        self.ln_ff = LayerNorm(dim)
        self.ffn = MLP(dim, 2 * dim, dim, rng, out_std=0.5 / np.sqrt(dim))

    def cross(self, queries: Tensor, ref: np.ndarray, reduced: Tensor) -> Tensor:
        B, H, W, C = reduced.shape
        mem = reduced.reshape(B, H * W, C)
        k, v = T.split(self.kv(mem), [C, C], axis=-1)
        q = self.q(self.ln_cross(queries))
        mask = window_mask(ref, (H, W), self.window)
        h = T.attention(split_heads(q, self.heads), split_heads(k, self.heads), split_heads(v, self.heads), mask)
        return merge_heads(h)

    def __call__(self, queries: Tensor, ref: np.ndarray, reduced: Tensor) -> Tensor:
        q = queries + self.out(self.cross(queries, ref, reduced))
        q = q + self.self_attn(self.ln_self(q))
        return q + self.ffn(self.ln_ff(q))


def windowed_cross_attend(layer: WindowedCrossLayer, queries: Tensor, ref: np.ndarray, reduced: Tensor) -> Tensor:
    return layer(queries, ref, reduced)


class RegionTokenizer(Module):
    """Anchor queries plus a stack of refinement layers.

    ``attention_kind`` is ``"deformable"`` (default) or ``"windowed"``; the
    windowed path first fuses the channel-concatenated levels with one MLP.
    """

    def __init__(self, num_tokens: int, dim: int, n_levels: int, rng: Rng, depth: int = 6, n_points: int = 4,
                 heads: int = 4, attention_kind: str = "deformable", window: int = 3):
        if attention_kind not in ("deformable", "windowed"):
            raise ConfigError(f"unknown attention_kind {attention_kind!r}")
        self.attention_kind = attention_kind
        self.n_levels = n_levels
        self.anchors = AnchorQueries(num_tokens, dim, rng)
        if attention_kind == "deformable":
            self.layers = [DeformLayer(dim, n_levels, n_points, heads, rng) for _ in range(depth)]
            self.fuse = None
        else:
            self.layers = [WindowedCrossLayer(dim, heads, window, rng) for _ in range(depth)]
            self.fuse = MLP(n_levels * dim, dim, dim, rng)

    @property
    def num_tokens(self) -> int:
        return self.anchors.count

    def __call__(self, feats: MultiLevelFeatures) -> Tensor:
        return tokenize(self, feats)


def tokenize(stack: RegionTokenizer, feats: MultiLevelFeatures) -> Tensor:
    """Refined anchor content ``[B, T, C]`` in row-major anchor-grid order."""
    levels = feats.levels
    if len(levels) != stack.n_levels:
        raise ConfigError(f"tokenizer built for {stack.n_levels} levels, got {len(levels)}")
    B = levels[0].shape[0]
    C = stack.anchors.content.shape[-1]
    if levels[0].shape[-1] != C:
        raise ShapeError(f"feature width {levels[0].shape[-1]} != query width {C}")
    ref = stack.anchors.reference_points.data
    q = T.broadcast_to(stack.anchors.content, (B,) + stack.anchors.content.shape)
    if stack.attention_kind == "deformable":
        stacked = level_stack(feats)
        for layer in stack.layers:
            q = layer(q, ref, stacked)
    else:
        reduced = stack.fuse(T.concat(levels, axis=-1))
        for layer in stack.layers:
            q = layer(q, ref, reduced)
    return q
