"""Fixed-random patch transformer standing in for a pretrained vision foundation model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import MLP, Block, Module, param
from .rng import Rng
from .tensor import Tensor, no_grad


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    n_layers: int = 4
    heads: int = 4
    tap_layers: tuple = (1, 2, 3, 4)
    proj_dim: int = 64
    seed: int = 0
    # fixed input standardization, as pretrained encoders apply to [0, 1] pixels
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        taps = list(self.tap_layers)
        if not taps or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"tap_layers must be strictly increasing, got {taps}")
        if taps[-1] != self.n_layers or taps[0] < 1:
            raise ConfigError(f"last tap must equal n_layers={self.n_layers}, got {taps}")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class MultiLevelFeatures:
    """Per-tap feature grids ``[B, H_f, W_f, proj_dim]`` plus the raw deepest grid."""

    levels: list
    target: Tensor
    raw_levels: list = field(default_factory=list)

    @property
    def grid(self):
        return self.target.shape[-3:-1]


class FrozenEncoder(Module):
    def __init__(self, cfg: EncoderConfig):
        cfg.validate()
        self.cfg = cfg
        rng = Rng(cfg.seed)
        p = cfg.patch_size
        self.patch_embed = param(rng.normal((3 * p * p, cfg.embed_dim), 1.0 / np.sqrt(3 * p * p)), trainable=False)
        self.patch_bias = param(np.zeros(cfg.embed_dim), trainable=False)
        self.pos_embed = param(rng.normal((cfg.grid * cfg.grid, cfg.embed_dim), 0.5), trainable=False)
        self.blocks = [
            Block(cfg.embed_dim, cfg.heads, rng, trainable=False, residual_std=0.5 / np.sqrt(cfg.embed_dim))
            for _ in range(cfg.n_layers)
        ]

    def patchify(self, images: Tensor) -> Tensor:
        cfg = self.cfg
        if images.shape[-3:] != (cfg.image_size, cfg.image_size, 3):
            raise ShapeError(f"encoder expects [..., {cfg.image_size}, {cfg.image_size}, 3], got {images.shape}")
        batched = images if images.ndim == 4 else images.reshape((1,) + images.shape)
        B = batched.shape[0]
        g, p = cfg.grid, cfg.patch_size
        x = batched.reshape(B, g, p, g, p, 3)
        x = T.transpose(x, (0, 1, 3, 2, 4, 5)).reshape(B, g * g, p * p * 3)
        return (x - cfg.pixel_mean) * (1.0 / cfg.pixel_std)

    def taps(self, images: Tensor) -> list:
        """Outputs of every tap layer as ``[B, H_f, W_f, embed_dim]`` grids."""
        cfg = self.cfg
        x = T.linear(self.patchify(images), self.patch_embed, self.patch_bias) + self.pos_embed
        B = x.shape[0]
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in cfg.tap_layers:
                out.append(x.reshape(B, cfg.grid, cfg.grid, cfg.embed_dim))
        return out

    def deep_features(self, images: Tensor) -> Tensor:
        """Deepest-layer grid; differentiable with respect to ``images``."""
        cfg = self.cfg
        x = T.linear(self.patchify(images), self.patch_embed, self.patch_bias) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return x.reshape(x.shape[0], cfg.grid, cfg.grid, cfg.embed_dim)

    def pooled(self, images) -> np.ndarray:
        """Mean-pooled deepest features ``[B, embed_dim]`` (evaluation feature space)."""
        with no_grad():
            f = self.deep_features(images if isinstance(images, Tensor) else Tensor(images))
        return f.data.mean(axis=(1, 2))


def build_frozen_encoder(cfg: EncoderConfig) -> FrozenEncoder:
    return FrozenEncoder(cfg)


class LevelProjection(Module):
    """Independent trainable two-layer MLP per feature level."""

    def __init__(self, n_levels: int, d_in: int, d_out: int, rng: Rng):
        self.mlps = [MLP(d_in, d_out, d_out, rng) for _ in range(n_levels)]

    def __call__(self, grids):
        return [mlp(g) for mlp, g in zip(self.mlps, grids)]


def encode_multilevel(enc: FrozenEncoder, images, projection: LevelProjection | None = None,
                      use_multilevel: bool = True) -> MultiLevelFeatures:
    """Frozen forward pass (no graph) followed by the trainable per-level projection."""
    if not isinstance(images, Tensor):
        images = Tensor(images)
    with no_grad():
        raw = enc.taps(images)
    target = raw[-1]
    chosen = raw if use_multilevel else raw[-1:]
    if projection is not None:
        if len(projection.mlps) != len(chosen):
            raise ConfigError(f"projection has {len(projection.mlps)} heads for {len(chosen)} levels")
        levels = projection(chosen)
    else:
        levels = list(chosen)
    return MultiLevelFeatures(levels=levels, target=target, raw_levels=raw)
