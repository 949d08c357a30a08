"""AdamW with global gradient-norm clipping."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def global_grad_norm(grads) -> float:
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None)))


class AdamWState:
    """First/second moments per parameter plus the step counter."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.95, weight_decay=0.05,
                 clip_norm=1.0, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adamw_step(params, grads, state: AdamWState) -> float:
    """One decoupled-weight-decay Adam update; returns the pre-clip gradient norm.

    ``grads`` entries may be ``None`` (treated as zero).
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ContractError(f"adamw_step: {len(params)} params, {len(grads)} grads, {len(state.m)} state slots")
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != m.shape or (g is not None and g.shape != m.shape):
            raise ContractError(f"adamw_step: parameter shape {p.data.shape} does not match state {m.shape}")

    norm = global_grad_norm(grads)
    scale = 1.0
    if state.clip_norm is not None and state.clip_norm > 0 and norm > state.clip_norm:
        scale = state.clip_norm / (norm + 1e-12)

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        if g is None:
            g = np.zeros_like(p.data)
        g = g * scale
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (state.lr * upd).astype(p.data.dtype)
    return norm
