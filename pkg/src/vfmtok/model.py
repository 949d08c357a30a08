"""Tokenizer composition: frozen encoder -> region tokens -> quantizer -> dual decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import FEATURE, IMAGE, DecoderConfig, ReconDecoder, decode_pixels, reconstruct_vfm_features
from .encoder import EncoderConfig, FrozenEncoder, LevelProjection, encode_multilevel
from .errors import ConfigError
from .nn import Module
from .quantizer import Codebook, dequantize, quantize_tokens
from .region import RegionTokenizer
from .rng import Rng
from .tensor import Tensor, no_grad


@dataclass
class TokenizerConfig:
    """Every knob of the tokenizer, flat so it round-trips through ``key = value`` files."""

    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    enc_layers: int = 4
    enc_heads: int = 4
    tap_layers: tuple = (1, 2, 3, 4)
    proj_dim: int = 64
    encoder_seed: int = 0

    num_tokens: int = 16
    deform_depth: int = 6
    n_points: int = 4
    attention_kind: str = "deformable"
    window: int = 3
    use_multilevel: bool = True
    grid_mode: bool = False

    codebook_size: int = 256
    code_dim: int = 8

    dec_depth: int = 2
    dec_heads: int = 4
    n_registers: int = 4
    shared_vit: bool = True
    share_mask_token: bool = False
    dec_channels: int = 32

    alpha: float = 1.0
    lam: float = 1.0
    beta: float = 0.25
    perceptual_weight: float = 1.0

    lr: float = 3e-4
    batch_size: int = 32
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.patch_size, self.embed_dim, self.enc_layers, self.enc_heads,
                             tuple(self.tap_layers), self.proj_dim, self.encoder_seed)

    def decoder_config(self) -> DecoderConfig:
        grid = self.image_size // self.patch_size
        return DecoderConfig(width=self.proj_dim, depth=self.dec_depth, heads=self.dec_heads, grid=grid,
                             feature_grid=grid, embed_dim=self.embed_dim, image_size=self.image_size,
                             n_registers=self.n_registers, shared_vit=self.shared_vit,
                             share_mask_token=self.share_mask_token, channels=self.dec_channels)

    def replace(self, **kw) -> "TokenizerConfig":
        return dataclasses.replace(self, **kw)

    def validate(self):
        self.encoder_config().validate()
        for name in ("alpha", "lam", "beta", "perceptual_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.attention_kind not in ("deformable", "windowed"):
            raise ConfigError(f"attention_kind must be deformable|windowed, got {self.attention_kind!r}")


class TokenizerOutput:
    """Everything one forward pass produces; fields are Tensors unless noted."""

    def __init__(self, **kw):
        self.__dict__.update(kw)


class VFMTokenizer(Module):
    def __init__(self, cfg: TokenizerConfig):
        cfg.validate()
        self.cfg = cfg
        rng = Rng(cfg.seed)
        self.frozen_encoder = FrozenEncoder(cfg.encoder_config())
        n_levels = len(cfg.tap_layers) if cfg.use_multilevel else 1
        if cfg.grid_mode:
            self.projection = None
            self.region_tokenizer = None
            query_dim = cfg.embed_dim
        else:
            self.projection = LevelProjection(n_levels, cfg.embed_dim, cfg.proj_dim, rng.spawn(1))
            self.region_tokenizer = RegionTokenizer(cfg.num_tokens, cfg.proj_dim, n_levels, rng.spawn(2),
                                                    depth=cfg.deform_depth, n_points=cfg.n_points,
                                                    heads=cfg.dec_heads, attention_kind=cfg.attention_kind,
                                                    window=cfg.window)
            query_dim = cfg.proj_dim
        self.quantizer = Codebook(cfg.codebook_size, cfg.code_dim, query_dim, rng.spawn(3), out_dim=cfg.proj_dim)
        self.decoder = ReconDecoder(cfg.decoder_config(), rng.spawn(5))

    @property
    def num_tokens(self) -> int:
        if self.cfg.grid_mode:
            g = self.cfg.image_size // self.cfg.patch_size
            return g * g
        return self.cfg.num_tokens

    def trainable_named(self):
        return [(n, p) for n, p in self.named_parameters()]

    def set_training(self, flag: bool):
        self.quantizer.training = flag

    # -- pipeline stages ----------------------------------------------------
    def continuous_tokens(self, images: Tensor):
        """Region-adaptive tokens ``[B, T, C]`` and the multi-level features."""
        feats = encode_multilevel(self.frozen_encoder, images, self.projection, self.cfg.use_multilevel)
        if self.cfg.grid_mode:
            B, g, _, E = feats.target.shape
            return feats.target.reshape(B, g * g, E), feats
        return self.region_tokenizer(feats), feats

    def forward(self, images, with_features: bool = True) -> TokenizerOutput:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        tokens, feats = self.continuous_tokens(images)
        q = quantize_tokens(self.quantizer, tokens, self.cfg.beta)
        f_img, cls, _ = self.decoder.run_branch(q.quantized, IMAGE)
        recon = decode_pixels(self.decoder, f_img)
        pred_feat = None
        if with_features:
            f_feat, _, _ = self.decoder.run_branch(q.quantized, FEATURE)
            pred_feat = reconstruct_vfm_features(self.decoder, f_feat)
        return TokenizerOutput(images=images, tokens=tokens, feats=feats, quant=q, recon=recon, cls=cls,
                               pred_feat=pred_feat, target=feats.target, indices=q.indices)

    __call__ = forward

    @property
    def dtype(self):
        return self.quantizer.vectors.dtype

    def encode_indices(self, images, batch_size: int = 64) -> np.ndarray:
        """Discrete token indices ``[B, T]`` without building a graph."""
        images = np.asarray(images)
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                x = Tensor(images[i : i + batch_size].astype(self.dtype))
                tokens, _ = self.continuous_tokens(x)
                q = quantize_tokens(self.quantizer, tokens, self.cfg.beta)
                out.append(q.indices)
        return np.concatenate(out, axis=0)

    def decode_indices(self, indices, batch_size: int = 64) -> np.ndarray:
        """Images ``[B, H, W, 3]`` from code indices (feature branch is never run)."""
        indices = np.asarray(indices)
        out = []
        with no_grad():
            for i in range(0, len(indices), batch_size):
                q = dequantize(self.quantizer, indices[i : i + batch_size])
                f_img, _, _ = self.decoder.run_branch(q, IMAGE)
                out.append(decode_pixels(self.decoder, f_img).data)
        return np.concatenate(out, axis=0)

    def reconstruct(self, images, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images)
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                o = self.forward(images[i : i + batch_size].astype(self.dtype), with_features=False)
                out.append(o.recon.data)
        return np.concatenate(out, axis=0)

    def cls_features(self, images, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images)
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                o = self.forward(images[i : i + batch_size].astype(self.dtype), with_features=False)
                out.append(o.cls.data)
        return np.concatenate(out, axis=0)
