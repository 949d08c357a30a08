"""Tokenizer objective, training loop and CLS linear probing."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import feature_sim_loss
from .errors import ContractError, NumericError
from .model import TokenizerConfig, VFMTokenizer
from .optim import AdamWState, adamw_step
from .quantizer import codebook_usage
from .rng import Rng
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TokenizerLossWeights:
    alpha: float = 1.0
    lam: float = 1.0
    beta: float = 0.25
    perceptual_weight: float = 1.0

    @classmethod
    def from_config(cls, cfg: TokenizerConfig):
        return cls(cfg.alpha, cfg.lam, cfg.beta, cfg.perceptual_weight)


def tokenizer_loss(model: VFMTokenizer, images, weights: TokenizerLossWeights | None = None):
    """Total objective and its weighted per-term breakdown.

    ``total = alpha * (l2 + perceptual_weight * perc) + lam * sim + vq``.  The
    perceptual term is the mean-squared distance between frozen-encoder
    deepest features of the reconstruction and of the input.  When ``lam`` is
    zero the feature branch is not run.
    """
    w = weights or TokenizerLossWeights.from_config(model.cfg)
    out = model.forward(images, with_features=w.lam > 0)
    x = out.images
    l2 = T.mse(out.recon, x)
    target = T.stop_gradient(out.target)
    perc = T.mse(model.frozen_encoder.deep_features(out.recon), target)
    terms = {
        "loss_l2": w.alpha * l2,
        "loss_perc": (w.alpha * w.perceptual_weight) * perc,
        "loss_vq": out.quant.loss,
    }
    if w.lam > 0:
        terms["loss_sim"] = w.lam * feature_sim_loss(out.pred_feat, target)
    total = terms["loss_l2"] + terms["loss_perc"] + terms["loss_vq"]
    if "loss_sim" in terms:
        total = total + terms["loss_sim"]
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown.setdefault("loss_sim", 0.0)
    return total, breakdown, out


class Batcher:
    """Epoch-wise seeded shuffling over a fixed index set."""

    def __init__(self, n: int, batch_size: int, rng: Rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        b = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return b


def recon_mse(model: VFMTokenizer, images, batch_size: int = 64) -> float:
    rec = model.reconstruct(images, batch_size)
    return float(np.mean((rec.astype(np.float64) - np.asarray(images, dtype=np.float64)) ** 2))


def measure_usage(model: VFMTokenizer, images, batch_size: int = 64) -> float:
    model.quantizer.reset_usage()
    model.set_training(False)
    try:
        model.encode_indices(images, batch_size)
    finally:
        model.set_training(True)
    return codebook_usage(model.quantizer)


def train_tokenizer(train_images, cfg: TokenizerConfig, steps: int, seed: int | None = None,
                    model: VFMTokenizer | None = None, metrics=None, run_id: str = "tok",
                    log_every: int = 1):
    """Optimize the tokenizer for ``steps`` minibatch updates.

    ``metrics`` is a callable receiving one dict per logged step.  Returns the
    trained model; ``steps == 0`` returns the initialization untouched.
    """
    seed = cfg.seed if seed is None else seed
    model = model or VFMTokenizer(cfg)
    params = model.parameters()
    opt = AdamWState(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    train_images = np.asarray(train_images)
    batcher = Batcher(len(train_images), cfg.batch_size, Rng(seed).spawn(0xBA7C))
    weights = TokenizerLossWeights.from_config(cfg)
    seen = np.zeros(cfg.codebook_size, dtype=bool)
    for step in range(steps):
        idx = batcher.next()
        batch = train_images[idx].astype(model.dtype)
        total, breakdown, out = tokenizer_loss(model, batch, weights)
        value = float(total.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite tokenizer loss at step {step} (batch indices {idx.tolist()})")
        model.zero_grad()
        total.backward()
        gnorm = adamw_step(params, [p.grad for p in params], opt)
        seen[np.asarray(out.indices).reshape(-1)] = True
        if metrics is not None and (step % log_every == 0 or step == steps - 1):
            rec = {"run_id": run_id, "step": step, "loss_total": value, **breakdown,
                   "usage": float(seen.mean()), "grad_norm": gnorm}
            metrics(rec)
    model.zero_grad()
    return model


def linear_probe(train_x, train_y, test_x, test_y, seed: int = 0) -> float:
    """Top-1 accuracy of a multinomial logistic-regression probe on standardized features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    train_y = np.asarray(train_y)
    if len(np.unique(train_y)) < 2:
        raise ContractError("linear probe needs at least two classes")
    scaler = StandardScaler().fit(train_x)
    clf = LogisticRegression(max_iter=2000, C=1.0, random_state=seed)
    clf.fit(scaler.transform(train_x), train_y)
    return float((clf.predict(scaler.transform(test_x)) == np.asarray(test_y)).mean())


def linear_probe_cls(model: VFMTokenizer, train, test, seed: int = 0) -> float:
    """Probe accuracy on the decoder's CLS output, tokenizer frozen."""
    (xtr, ytr), (xte, yte) = train, test
    return linear_probe(model.cls_features(xtr), ytr, model.cls_features(xte), yte, seed)
