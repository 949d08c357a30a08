"""Mask-token decoder: causal ViT shared by the pixel branch and the feature branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Block, LayerNorm, Linear, Module, param
from .rng import Rng
from .tensor import Tensor

IMAGE, FEATURE = "image", "feature"


@dataclass
class DecoderConfig:
    width: int = 64
    depth: int = 3
    heads: int = 4
    grid: int = 8  # H_m = W_m
    feature_grid: int = 8  # H_f = W_f of the frozen encoder
    embed_dim: int = 64  # frozen encoder width (feature-head output)
    image_size: int = 32
    n_registers: int = 4
    shared_vit: bool = True
    share_mask_token: bool = False
    channels: int = 32


class ViT(Module):
    def __init__(self, width: int, depth: int, heads: int, rng: Rng):
        self.blocks = [Block(width, heads, rng, residual_std=0.5 / np.sqrt(width)) for _ in range(depth)]
        self.ln_f = LayerNorm(width) if depth > 0 else None

    def __call__(self, seq: Tensor, mask=None) -> Tensor:
        x = seq
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x) if self.ln_f is not None else x


class MaskTokenBank(Module):
    def __init__(self, width: int, grid: int, n_registers: int, rng: Rng, share_mask_token: bool = False):
        self.image_mask_token = param(rng.normal((1, width), 0.02))
        self.feature_mask_token = None if share_mask_token else param(rng.normal((1, width), 0.02))
        self.pos_embed = param(rng.normal((grid, grid, width), 0.02))
        self.cls_token = param(rng.normal((1, width), 0.02))
        self.register_tokens = param(rng.normal((n_registers, width), 0.02)) if n_registers > 0 else None

    @property
    def n_registers(self) -> int:
        return 0 if self.register_tokens is None else self.register_tokens.shape[0]

    def mask_token(self, branch: str) -> Tensor:
        if branch == FEATURE and self.feature_mask_token is not None:
            return self.feature_mask_token
        return self.image_mask_token


def resize_pos_embed(pos: Tensor, grid) -> Tensor:
    """Bilinear resize of ``pos[H, W, C]`` to ``grid``; identity when sizes agree."""
    H, W, C = pos.shape
    gh, gw = grid
    if (gh, gw) == (H, W):
        return pos
    r = (np.arange(gh) + 0.5) * H / gh - 0.5
    c = (np.arange(gw) + 0.5) * W / gw - 0.5
    rr, cc = np.meshgrid(r, c, indexing="ij")
    pts = Tensor(np.stack([rr.ravel(), cc.ravel()], -1).astype(pos.dtype))
    return T.bilinear_sample(pos, pts).reshape(gh, gw, C)


def assemble_sequence(tokens: Tensor, bank: MaskTokenBank, branch: str, grid=None) -> Tensor:
    """``[tokens] ++ [CLS] ++ [registers] ++ [mask + E]`` along the sequence axis."""
    B, Tn, Wd = tokens.shape
    if Wd != bank.image_mask_token.shape[-1]:
        raise ShapeError(f"token width {Wd} != decoder width {bank.image_mask_token.shape[-1]}")
    pos = bank.pos_embed if grid is None else resize_pos_embed(bank.pos_embed, grid)
    gh, gw = pos.shape[:2]
    masks = (pos + bank.mask_token(branch)).reshape(1, gh * gw, Wd)
    parts = [tokens, T.broadcast_to(bank.cls_token.reshape(1, 1, Wd), (B, 1, Wd))]
    if bank.register_tokens is not None:
        parts.append(T.broadcast_to(bank.register_tokens.reshape(1, -1, Wd), (B, bank.n_registers, Wd)))
    parts.append(T.broadcast_to(masks, (B, gh * gw, Wd)))
    return T.concat(parts, axis=1)


class PixelDecoder(Module):
    """Conv stack: grid -> (conv, GELU, 2x upsample) until image size -> conv to RGB -> sigmoid."""

    def __init__(self, width: int, grid: int, image_size: int, channels: int, rng: Rng):
        ups = image_size // grid
        n_up = int(np.log2(ups)) if ups > 0 else -1
        if ups < 1 or 2**n_up != ups:
            raise ConfigError(f"image_size/grid = {image_size}/{grid} must be a power of two")
        self.grid = grid
        self.n_up = n_up
        chans = [width] + [channels] * n_up + [channels // 2]
        self.convs = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.convs.append(_Conv(cin, cout, rng))
        self.to_rgb = _Conv(chans[-1], 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = T.gelu(conv(x))
            if i < self.n_up:
                x = T.upsample_nearest(x, 2)
        return T.sigmoid(self.to_rgb(x))


class _Conv(Module):
    def __init__(self, cin: int, cout: int, rng: Rng, k: int = 3):
        self.weight = param(rng.normal((k, k, cin, cout), 1.0 / np.sqrt(k * k * cin)))
        self.bias = param(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class ReconDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: Rng):
        self.cfg = cfg
        self.bank = MaskTokenBank(cfg.width, cfg.grid, cfg.n_registers, rng, cfg.share_mask_token)
        self.vit = ViT(cfg.width, cfg.depth, cfg.heads, rng)
        self.vit_feature = None if cfg.shared_vit else ViT(cfg.width, cfg.depth, cfg.heads, rng)
        self.pixel_decoder = PixelDecoder(cfg.width, cfg.grid, cfg.image_size, cfg.channels, rng)
        self.feature_head = Linear(cfg.width, cfg.embed_dim, rng)

    def branch_vit(self, branch: str) -> ViT:
        if branch == FEATURE and self.vit_feature is not None:
            return self.vit_feature
        return self.vit

    def branch_grid(self, branch: str):
        g = self.cfg.feature_grid if branch == FEATURE else self.cfg.grid
        return (g, g)

    def run_branch(self, tokens: Tensor, branch: str):
        """Returns ``(mask_outputs [B, G, W], cls [B, W], full_output [B, S, W])``."""
        seq = assemble_sequence(tokens, self.bank, branch, self.branch_grid(branch))
        out = vit_forward(self.branch_vit(branch), seq)
        n_pre = tokens.shape[1] + 1 + self.bank.n_registers
        return out[:, n_pre:, :], out[:, tokens.shape[1], :], out


def vit_forward(vit: ViT, seq: Tensor) -> Tensor:
    """Causal self-attention over the assembled order (lower-triangular mask)."""
    return vit(seq, T.causal_mask(seq.shape[-2]))


def decode_pixels(dec: ReconDecoder, f_img: Tensor) -> Tensor:
    B, G, Wd = f_img.shape
    g = dec.cfg.grid
    if G != g * g:
        raise ShapeError(f"decode_pixels: {G} mask outputs do not form a {g}x{g} grid")
    return dec.pixel_decoder(f_img.reshape(B, g, g, Wd))


def reconstruct_vfm_features(dec: ReconDecoder, f_feat: Tensor) -> Tensor:
    B, G, Wd = f_feat.shape
    g = dec.cfg.feature_grid
    if G != g * g:
        raise ConfigError(f"feature branch grid {G} does not match encoder grid {g}x{g}")
    return dec.feature_head(f_feat).reshape(B, g, g, dec.cfg.embed_dim)


def feature_sim_loss(pred: Tensor, target) -> Tensor:
    """Mean over grid cells of ``1 - cos(pred, target)``; ``target`` carries no gradient."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"feature_sim_loss: {pred.shape} vs {target.shape}")
    return T.mean(1.0 - T.cosine_similarity(pred, T.stop_gradient(target), axis=-1))
