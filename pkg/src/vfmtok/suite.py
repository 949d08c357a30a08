"""Finite-difference suite over every differentiable primitive and the composed losses.

Each primitive is reduced to a scalar through a fixed random projection so
that every output element contributes a distinct weight to the gradient.
"""

from __future__ import annotations

import time
import zlib

import numpy as np

from . import tensor as T
from .gradcheck import finite_diff_gradcheck
from .rng import Rng
from .tensor import Tensor

PRIMITIVE_TOL = 1e-4
COMPOSED_TOL = 1e-3


def _t(rng: np.random.Generator, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _proj(out: Tensor, seed: int) -> Tensor:
    # weights depend only on (seed, shape) so every re-evaluation sees the same projection
    w = np.random.default_rng([seed, *out.shape]).normal(size=out.shape)
    return T.tsum(out * Tensor(w.astype(out.dtype)))


def _shape(rng, ndim=2, lo=1, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _case(name, seed):
    """Build ``(f, inputs)`` for one primitive and seed."""
    rng = np.random.default_rng(zlib.crc32(name.encode()) + seed)
    pr = seed + 77
    sh = _shape(rng)

    if name in ("add", "sub", "mul"):
        a, b = _t(rng, *sh), _t(rng, 1, sh[1])
        op = {"add": T.add, "sub": T.sub, "mul": T.mul}[name]
        return lambda: _proj(op(a, b), pr), [a, b]
    if name == "div":
        a, b = _t(rng, *sh), _t(rng, *sh, lo=0.5, hi=2.0)
        return lambda: _proj(T.div(a, b), pr), [a, b]
    if name == "pow":
        a = _t(rng, *sh, lo=0.5, hi=2.0)
        return lambda: _proj(T.power(a, 3.0), pr), [a]
    if name in ("exp", "sin", "cos", "tanh", "sigmoid", "gelu", "silu", "neg"):
        a = _t(rng, *sh, lo=-2, hi=2)
        return lambda: _proj(getattr(T, name)(a), pr), [a]
    if name in ("log", "sqrt"):
        a = _t(rng, *sh, lo=0.5, hi=2.0)
        return lambda: _proj(getattr(T, name)(a), pr), [a]
    if name == "sum":
        a = _t(rng, *sh)
        return lambda: _proj(T.tsum(a, axis=seed % 2), pr), [a]
    if name == "mean":
        a = _t(rng, *sh)
        return lambda: _proj(T.mean(a, axis=seed % 2, keepdims=True), pr), [a]
    if name == "reshape":
        a = _t(rng, *sh)
        return lambda: _proj(a.reshape(-1), pr), [a]
    if name == "transpose":
        a = _t(rng, *sh, 3)
        return lambda: _proj(T.transpose(a, (2, 0, 1)), pr), [a]
    if name == "getitem":
        a = _t(rng, 5, sh[1])
        idx = np.array([0, 3, 3, 1])
        return lambda: _proj(a[1:4] * 2.0, pr) + _proj(a[idx], pr), [a]
    if name == "concat":
        a, b = _t(rng, *sh), _t(rng, sh[0], 2)
        return lambda: _proj(T.concat([a, b], axis=1), pr), [a, b]
    if name == "stack":
        a, b = _t(rng, *sh), _t(rng, *sh)
        return lambda: _proj(T.stack([a, b], axis=1), pr), [a, b]
    if name == "split":
        a = _t(rng, sh[0], 5)
        return lambda: _proj(T.split(a, [2, 3], axis=1)[1], pr) + _proj(T.split(a, [2, 3], axis=1)[0], pr), [a]
    if name == "broadcast_to":
        a = _t(rng, 1, sh[1])
        return lambda: _proj(T.broadcast_to(a, (3, sh[1])), pr), [a]
    if name == "matmul":
        m, k, n = _shape(rng, 3)
        a, b = _t(rng, m, k), _t(rng, k, n)
        return lambda: _proj(T.matmul(a, b), pr), [a, b]
    if name == "matmul_batched":
        m, k, n = _shape(rng, 3)
        a, b = _t(rng, 2, m, k), _t(rng, k, n)
        return lambda: _proj(T.matmul(a, b), pr), [a, b]
    if name == "softmax":
        a = _t(rng, *sh, lo=-3, hi=3)
        return lambda: _proj(T.softmax(a, axis=-1), pr), [a]
    if name == "log_softmax":
        a = _t(rng, *sh, lo=-3, hi=3)
        return lambda: _proj(T.log_softmax(a, axis=-1), pr), [a]
    if name == "layernorm":
        d = int(rng.integers(2, 9))
        x, g, b = _t(rng, 3, d), _t(rng, d), _t(rng, d)
        return lambda: _proj(T.layernorm(x, g, b), pr), [x, g, b]
    if name == "rmsnorm":
        d = int(rng.integers(2, 9))
        x, g = _t(rng, 3, d), _t(rng, d)
        return lambda: _proj(T.rmsnorm(x, g), pr), [x, g]
    if name == "l2_normalize":
        x = _t(rng, *sh)
        return lambda: _proj(T.l2_normalize(x), pr), [x]
    if name == "cosine_similarity":
        a, b = _t(rng, *sh), _t(rng, *sh)
        return lambda: _proj(T.cosine_similarity(a, b), pr), [a, b]
    if name == "mse":
        a, b = _t(rng, *sh), _t(rng, *sh)
        return lambda: T.mse(a, b), [a, b]
    if name == "cross_entropy":
        n, c = _shape(rng, 2, 2, 6)
        x = _t(rng, n, c, lo=-3, hi=3)
        tg = rng.integers(0, c, size=n)
        return lambda: T.cross_entropy(x, tg), [x]
    if name == "embedding":
        table = _t(rng, 6, sh[1])
        idx = rng.integers(0, 6, size=(2, 4))
        return lambda: _proj(T.embedding(table, idx), pr), [table]
    if name == "attention":
        s, d = _shape(rng, 2, 2, 5)
        q, k, v = _t(rng, 2, s, d), _t(rng, 2, s, d), _t(rng, 2, s, d)
        return lambda: _proj(T.attention(q, k, v, T.causal_mask(s)), pr), [q, k, v]
    if name == "bilinear_sample":
        feat = _t(rng, 5, 5, 3)
        pts = Tensor(rng.uniform(0.2, 3.8, size=(20, 2)), requires_grad=True)
        return lambda: _proj(T.bilinear_sample(feat, pts), pr), [feat, pts]
    if name == "conv2d":
        x, w, b = _t(rng, 2, 4, 3, 2), _t(rng, 3, 3, 2, 3), _t(rng, 3)
        return lambda: _proj(T.conv2d(x, w, b), pr), [x, w, b]
    if name == "upsample":
        x = _t(rng, 1, 2, 3, 2)
        return lambda: _proj(T.upsample_nearest(x, 2), pr), [x]
    if name == "dropout":
        x = _t(rng, *sh)
        return lambda: _proj(T.dropout(x, 0.3, Rng(seed)), pr), [x]
    if name == "straight_through":
        z, c = _t(rng, *sh), Tensor(rng.uniform(-1, 1, size=sh))
        return lambda: _proj(T.straight_through(z, c) ** 2, pr), [z]
    if name == "rope2d":
        from .ar import rope2d_apply

        x = _t(rng, 2, 5, 8)
        pos = rng.integers(0, 4, size=(5, 2))
        return lambda: _proj(rope2d_apply(x, pos), pr), [x]
    raise KeyError(name)


PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sqrt", "sin", "cos", "tanh", "sigmoid", "gelu",
    "silu", "sum", "mean", "reshape", "transpose", "getitem", "concat", "stack", "split", "broadcast_to",
    "matmul", "matmul_batched", "softmax", "log_softmax", "layernorm", "rmsnorm", "l2_normalize",
    "cosine_similarity", "mse", "cross_entropy", "embedding", "attention", "bilinear_sample", "conv2d",
    "upsample", "dropout", "straight_through", "rope2d",
)


def check_primitive(name: str, seed: int, step: float = 1e-5) -> float:
    f, inputs = _case(name, seed)
    return finite_diff_gradcheck(f, inputs, step=step)


def micro_tokenizer_config(**kw):
    from .model import TokenizerConfig

    base = dict(image_size=8, patch_size=2, embed_dim=8, enc_layers=2, enc_heads=2, tap_layers=(1, 2),
                proj_dim=8, num_tokens=4, deform_depth=2, n_points=2, codebook_size=16, code_dim=4,
                dec_depth=1, dec_heads=2, n_registers=2, dec_channels=4, seed=3)
    base.update(kw)
    return TokenizerConfig(**base)


def randomize(model, seed: int, scale: float = 0.3):
    """Perturb every trainable tensor so zero-initialized maps carry gradient too."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = p.data + scale * rng.normal(size=p.shape).astype(p.data.dtype)
    return model


def check_tokenizer_loss(seed: int = 0, max_elems: int = 6, **cfg_kw):
    """Composed gradcheck of the full tokenizer objective on one 8x8 image in float64."""
    from .model import VFMTokenizer
    from .trainer import tokenizer_loss

    model = randomize(VFMTokenizer(micro_tokenizer_config(**cfg_kw)).astype(np.float64), seed)
    img = np.random.default_rng(seed).uniform(0, 1, size=(1, 8, 8, 3))
    params = model.parameters()
    return finite_diff_gradcheck(lambda: tokenizer_loss(model, img)[0], params, max_elems=max_elems,
                                 return_details=True)


def check_ar_loss(seed: int = 0, max_elems: int = 6):
    from .ar import ARConfig, ARModel, ar_loss

    cfg = ARConfig(vocab=12, n_classes=3, layers=1, width=16, heads=2, seq_len=4, embed_dropout=0.0,
                   class_dropout=0.0, seed=seed)
    model = randomize(ARModel(cfg).astype(np.float64), seed, scale=0.1)
    rng = np.random.default_rng(seed)
    cls = rng.integers(0, 3, size=2)
    seq = rng.integers(0, 12, size=(2, 4))
    return finite_diff_gradcheck(lambda: ar_loss(model, cls, seq), model.parameters(), max_elems=max_elems,
                                 return_details=True)


def run_suite(seeds: int = 20, report=print) -> bool:
    """Run every primitive over ``seeds`` seeds plus the composed checks; True when all pass."""
    ok = True
    t0 = time.time()
    for name in PRIMITIVES:
        worst = max(check_primitive(name, s) for s in range(seeds))
        passed = worst < PRIMITIVE_TOL
        ok &= passed
        report(f"{'PASS' if passed else 'FAIL'} {name:<18} max rel err {worst:.2e}")
    for label, fn in (("tokenizer_loss", check_tokenizer_loss), ("ar_loss", check_ar_loss)):
        worst, _ = fn()
        passed = worst < COMPOSED_TOL
        ok &= passed
        report(f"{'PASS' if passed else 'FAIL'} {label:<18} max rel err {worst:.2e}")
    report(f"gradcheck suite {'passed' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return ok
