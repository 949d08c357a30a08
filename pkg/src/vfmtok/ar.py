"""Class-conditional next-token transformer over codebook indices.

Layout: ``[class] ++ codes[:-1]`` in, ``codes`` out.  Position 0 carries the
class embedding (or the null class used for dropout and unconditional
guidance); position ``t > 0`` carries code ``t - 1`` and is rotated by that
code's anchor-grid cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .nn import Linear, Module, param, split_heads, merge_heads
from .optim import AdamWState, adamw_step
from .rng import Rng
from .tensor import Tensor, no_grad


@dataclass
class ARConfig:
    vocab: int = 256
    n_classes: int = 8
    layers: int = 4
    width: int = 128
    heads: int = 4
    seq_len: int = 16
    class_dropout: float = 0.1
    embed_dropout: float = 0.1
    rope_base: float = 100.0
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0

    def validate(self):
        if (self.width // self.heads) % 4:
            raise ConfigError(f"head dim {self.width // self.heads} must be divisible by 4 for 2D RoPE")
        side = math.isqrt(self.seq_len)
        if side * side != self.seq_len:
            raise ConfigError(f"seq_len {self.seq_len} must be a perfect square")

    @property
    def null_class(self) -> int:
        return self.n_classes


@dataclass
class SamplingConfig:
    cfg_scale: float = 1.0
    temperature: float = 1.0
    top_k: int = 0
    seed: int = 0

    def validate(self):
        if self.cfg_scale < 0 or self.temperature <= 0 or self.top_k < 0:
            raise ConfigError(f"invalid sampling config {self}")


@dataclass
class TokenSequence:
    class_id: int
    indices: np.ndarray


# -- 2D rotary embedding ------------------------------------------------------
def _rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    """cos/sin tables ``[S, head_dim]``: first half of the dims rotate by row, second half by column."""
    if head_dim % 4:
        raise ConfigError(f"head dim {head_dim} must be divisible by 4 for 2D RoPE")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    quarter = head_dim // 4
    theta = base ** (-np.arange(quarter) / quarter)
    ang_r = pos[:, :1] * theta
    ang_c = pos[:, 1:] * theta
    ang = np.concatenate([ang_r, ang_r, ang_c, ang_c], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate_half_matrix(head_dim: int, dtype) -> np.ndarray:
    """``x @ R`` maps each half-block ``[a, b]`` of row and column dims to ``[-b, a]``."""
    R = np.zeros((head_dim, head_dim), dtype=dtype)
    half, quarter = head_dim // 2, head_dim // 4
    for blk in (0, half):
        for i in range(quarter):
            a, b = blk + i, blk + quarter + i
            R[b, a] = -1.0
            R[a, b] = 1.0
    return R


def rope2d_apply(x: Tensor, grid_positions, base: float = 100.0) -> Tensor:
    """Rotate ``x[..., S, d]`` pairwise by ``position * theta_i``; row pairs then column pairs."""
    d = x.shape[-1]
    cos, sin = _rope_tables(grid_positions, d, base, x.dtype)
    R = Tensor(_rotate_half_matrix(d, x.dtype))
    return x * cos + T.matmul(x, R) * sin


def sequence_positions(seq_len: int, start: int = 0, count: int | None = None) -> np.ndarray:
    """Grid positions for sequence slots ``start .. start+count``; slot 0 is the class token at (0, 0)."""
    side = math.isqrt(seq_len)
    count = seq_len - start if count is None else count
    slots = np.arange(start, start + count)
    code = np.maximum(slots - 1, 0)
    return np.stack([code // side, code % side], axis=-1)


# -- model --------------------------------------------------------------------
class _Attention(Module):
    def __init__(self, cfg: ARConfig, rng: Rng):
        self.heads = cfg.heads
        self.base = cfg.rope_base
        self.qkv = Linear(cfg.width, 3 * cfg.width, rng, bias=False)
        self.proj = Linear(cfg.width, cfg.width, rng, bias=False, std=0.5 / math.sqrt(cfg.width * cfg.layers))

    def __call__(self, x: Tensor, positions: np.ndarray, start: int, cache: dict | None) -> Tensor:
        D = x.shape[-1]
        q, k, v = (split_heads(t, self.heads) for t in T.split(self.qkv(x), [D, D, D], axis=-1))
        q = rope2d_apply(q, positions, self.base)
        k = rope2d_apply(k, positions, self.base)
        n = x.shape[-2]
        if cache is not None:
            if "k" in cache:
                k = Tensor(np.concatenate([cache["k"], k.data], axis=-2))
                v = Tensor(np.concatenate([cache["v"], v.data], axis=-2))
            cache["k"], cache["v"] = k.data, v.data
        total = k.shape[-2]
        qpos = np.arange(start, start + n)[:, None]
        mask = np.arange(total)[None, :] <= qpos
        return self.proj(merge_heads(T.attention(q, k, v, mask)))


class _SwiGLU(Module):
    def __init__(self, cfg: ARConfig, rng: Rng):
        hidden = 2 * cfg.width
        self.w_gate = Linear(cfg.width, hidden, rng, bias=False)
        self.w_up = Linear(cfg.width, hidden, rng, bias=False)
        self.w_down = Linear(hidden, cfg.width, rng, bias=False, std=0.5 / math.sqrt(hidden * cfg.layers))

    def __call__(self, x: Tensor) -> Tensor:
        return self.w_down(T.silu(self.w_gate(x)) * self.w_up(x))


class _Block(Module):
    def __init__(self, cfg: ARConfig, rng: Rng):
        self.norm1 = param(np.ones(cfg.width))
        self.attn = _Attention(cfg, rng)
        self.norm2 = param(np.ones(cfg.width))
        self.ffn = _SwiGLU(cfg, rng)

    def __call__(self, x, positions, start, cache):
        x = x + self.attn(T.rmsnorm(x, self.norm1), positions, start, cache)
        return x + self.ffn(T.rmsnorm(x, self.norm2))


class ARModel(Module):
    def __init__(self, cfg: ARConfig):
        cfg.validate()
        self.cfg = cfg
        rng = Rng(cfg.seed)
        self.class_embed = param(rng.normal((cfg.n_classes + 1, cfg.width), 0.02))
        self.token_embed = param(rng.normal((cfg.vocab, cfg.width), 0.02))
        self.blocks = [_Block(cfg, rng) for _ in range(cfg.layers)]
        self.norm_f = param(np.ones(cfg.width))
        self.head = Linear(cfg.width, cfg.vocab, rng, bias=False, std=0.02 / math.sqrt(cfg.width))

    @property
    def dtype(self):
        return self.token_embed.dtype

    def embed(self, class_ids, codes, start: int = 0, drop_rng: Rng | None = None) -> Tensor:
        """Input embeddings for sequence slots ``start ..``; ``class_ids`` is used only when ``start == 0``."""
        parts = []
        if start == 0:
            parts.append(T.embedding(self.class_embed, np.asarray(class_ids).reshape(-1, 1)))
        if codes is not None and np.asarray(codes).shape[-1] > 0:
            tok = T.embedding(self.token_embed, np.asarray(codes))
            if drop_rng is not None:
                tok = T.dropout(tok, self.cfg.embed_dropout, drop_rng)
            parts.append(tok)
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def forward(self, class_ids, codes, caches=None, start: int = 0, drop_rng: Rng | None = None) -> Tensor:
        """Logits ``[B, n, vocab]`` for the ``n`` slots fed in, starting at slot ``start``."""
        x = self.embed(class_ids, codes, start, drop_rng)
        n = x.shape[1]
        if start + n > self.cfg.seq_len:
            raise ContractError(f"sequence of {start + n} slots exceeds seq_len {self.cfg.seq_len}")
        positions = sequence_positions(self.cfg.seq_len, start, n)
        for i, blk in enumerate(self.blocks):
            x = blk(x, positions, start, None if caches is None else caches[i])
        return self.head(T.rmsnorm(x, self.norm_f))

    __call__ = forward

    def new_cache(self):
        return [dict() for _ in self.blocks]


def ar_loss(model: ARModel, class_ids, codes, drop_rng: Rng | None = None) -> Tensor:
    """Mean next-token cross-entropy over the code positions."""
    codes = np.asarray(codes)
    logits = model(class_ids, codes[:, :-1], drop_rng=drop_rng)
    return T.cross_entropy(logits, codes)


def next_token_logits(model: ARModel, prefix, class_id, use_cache: bool = False) -> np.ndarray:
    """Logits ``[vocab]`` (or ``[B, vocab]`` for batched prefixes) for the slot after ``prefix``."""
    prefix = np.asarray(prefix, dtype=np.int64)
    batched = prefix.ndim == 2
    prefix2 = prefix if batched else prefix[None]
    cls = np.asarray(class_id).reshape(-1)
    if prefix2.shape[1] >= model.cfg.seq_len:
        raise ContractError(f"prefix length {prefix2.shape[1]} must be < {model.cfg.seq_len}")
    with no_grad():
        if not use_cache:
            out = model(cls, prefix2).data[:, -1]
        else:
            caches = model.new_cache()
            out = model(cls, None, caches, 0).data[:, -1]
            for t in range(prefix2.shape[1]):
                out = model(cls, prefix2[:, t : t + 1], caches, t + 1).data[:, -1]
    return out if batched else out[0]


def cfg_mix(logits_cond, logits_uncond, s: float):
    """``uncond + s * (cond - uncond)``; ``s == 1`` returns ``cond`` exactly."""
    if s < 0:
        raise ContractError("guidance scale must be >= 0")
    c = np.asarray(logits_cond)
    u = np.asarray(logits_uncond)
    if s == 1:
        return c.copy()
    if s == 0:
        return u.copy()
    return u + s * (c - u)


def _choose(logits: np.ndarray, temperature: float, top_k: int, rng: Rng) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    if top_k and top_k < z.shape[-1]:
        kth = np.sort(z, axis=-1)[:, -top_k][:, None]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p, axis=-1)
    u = rng.uniform(len(z))[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=-1), z.shape[-1] - 1)


def sample_sequence(model: ARModel, class_ids, cfg: SamplingConfig | None = None, greedy: bool = False) -> np.ndarray:
    """Autoregressively sample ``[B, T]`` indices with a KV cache.

    ``cfg_scale != 1`` runs a second, null-class stream and mixes logits.
    ``greedy`` takes the argmax at every step.
    """
    cfg = cfg or SamplingConfig()
    cfg.validate()
    cls = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    B = len(cls)
    guided = cfg.cfg_scale != 1.0
    stream_cls = np.concatenate([cls, np.full(B, model.cfg.null_class)]) if guided else cls
    rng = Rng(cfg.seed)
    caches = model.new_cache()
    out = np.zeros((B, model.cfg.seq_len), dtype=np.int64)
    with no_grad():
        logits = model(stream_cls, None, caches, 0).data[:, -1]
        for t in range(model.cfg.seq_len):
            mixed = cfg_mix(logits[:B], logits[B:], cfg.cfg_scale) if guided else logits
            nxt = np.argmax(mixed, axis=-1) if greedy else _choose(mixed, cfg.temperature, cfg.top_k, rng)
            out[:, t] = nxt
            if t + 1 < model.cfg.seq_len:
                feed = np.concatenate([nxt, nxt]) if guided else nxt
                logits = model(stream_cls, feed[:, None], caches, t + 1).data[:, -1]
    return out


def perplexity(model: ARModel, class_ids, codes, batch_size: int = 256) -> float:
    codes = np.asarray(codes)
    total, n = 0.0, 0
    with no_grad():
        for i in range(0, len(codes), batch_size):
            loss = ar_loss(model, np.asarray(class_ids)[i : i + batch_size], codes[i : i + batch_size])
            total += float(loss.data) * len(codes[i : i + batch_size])
            n += len(codes[i : i + batch_size])
    return float(np.exp(total / n))


def train_ar(class_ids, codes, cfg: ARConfig, steps: int, seed: int | None = None, model: ARModel | None = None,
             metrics=None, run_id: str = "ar", log_every: int = 1) -> ARModel:
    """Next-token training with class-condition dropout and token-embedding dropout."""
    seed = cfg.seed if seed is None else seed
    model = model or ARModel(cfg)
    codes = np.asarray(codes, dtype=np.int64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if codes.shape[1] != cfg.seq_len or codes.min() < 0 or codes.max() >= cfg.vocab:
        raise ContractError(f"token dataset {codes.shape} incompatible with seq_len {cfg.seq_len}, vocab {cfg.vocab}")
    params = model.parameters()
    opt = AdamWState(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    rng = Rng(seed).spawn(0xA5)
    bs = min(cfg.batch_size, len(codes))
    order, pos = np.empty(0, dtype=np.int64), 0
    ema = None
    for step in range(steps):
        if pos + bs > len(order):
            order, pos = rng.permutation(len(codes)), 0
        idx = order[pos : pos + bs]
        pos += bs
        cls = class_ids[idx].copy()
        cls[rng.uniform(bs) < cfg.class_dropout] = cfg.null_class
        loss = ar_loss(model, cls, codes[idx], drop_rng=rng if cfg.embed_dropout > 0 else None)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite AR loss at step {step} (batch indices {idx.tolist()})")
        model.zero_grad()
        loss.backward()
        gnorm = adamw_step(params, [p.grad for p in params], opt)
        ema = value if ema is None else 0.98 * ema + 0.02 * value
        if metrics is not None and (step % log_every == 0 or step == steps - 1):
            metrics({"run_id": run_id, "step": step, "loss": value, "perplexity": float(np.exp(value)),
                     "grad_norm": gnorm})
    model.zero_grad()
    return model
