"""Tokenize synthetic images, fit a small AR prior, and sample from it.

A few minutes on one CPU core.  Run with ``python3 demos/quickstart.py``.
"""

import numpy as np

from vfmtok.ar import ARConfig, SamplingConfig, perplexity, sample_sequence, train_ar
from vfmtok.data import SyntheticDatasetSpec, gen_synthetic_dataset
from vfmtok.metrics import toy_frechet
from vfmtok.model import TokenizerConfig, VFMTokenizer
from vfmtok.trainer import linear_probe_cls, measure_usage, recon_mse, train_tokenizer

ds = gen_synthetic_dataset(SyntheticDatasetSpec(images_per_class=100))
(xtr, ytr), (xv, yv) = ds.train, ds.val
print(f"{len(xtr)} train / {len(xv)} val images of shape {xtr.shape[1:]}")

cfg = TokenizerConfig(batch_size=16)
tok = VFMTokenizer(cfg)
print(f"untrained: val mse {recon_mse(tok, xv):.4f}")

# a short run; the loss drops fast in the first hundred steps
log = []
train_tokenizer(xtr, cfg, 150, model=tok, metrics=log.append, log_every=50)
for rec in log:
    print(f"step {rec['step']:4d}  loss {rec['loss_total']:.4f}  l2 {rec['loss_l2']:.4f}  sim {rec['loss_sim']:.4f}")
print(f"trained:   val mse {recon_mse(tok, xv):.4f}, usage {measure_usage(tok, xv):.3f}, "
      f"CLS probe {linear_probe_cls(tok, (xtr, ytr), (xv, yv)):.3f}")

codes = tok.encode_indices(xtr)
print("token grid of the first image:\n", codes[0].reshape(4, 4))

arcfg = ARConfig(vocab=cfg.codebook_size, n_classes=8, seq_len=codes.shape[1], layers=2, width=64, heads=2)
ar = train_ar(ytr, codes, arcfg, 300)
print(f"AR train perplexity {perplexity(ar, ytr, codes):.1f} (vocab {arcfg.vocab})")

classes = np.arange(96) % 8  # Fréchet needs more samples than feature dims
real = tok.frozen_encoder.pooled(xv.astype(tok.dtype))
for scale in (1.0, 2.0):
    seqs = sample_sequence(ar, classes, SamplingConfig(cfg_scale=scale, seed=1))
    fake = tok.frozen_encoder.pooled(tok.decode_indices(seqs).astype(tok.dtype))
    print(f"cfg scale {scale}: toy Fréchet to val features {toy_frechet(fake, real):.4f}")
