"""Command-line pipeline: one stage per invocation.

Exit codes: 0 success, 1 contract/config/format errors or missing files,
2 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import ContractError, NumericError

log = logging.getLogger("vfmtok")

ABLATIONS = {
    "shared_vit": [{"shared_vit": True}, {"shared_vit": False}],
    "use_multilevel": [{"use_multilevel": True}, {"use_multilevel": False}],
    "attention_kind": [{"attention_kind": "deformable"}, {"attention_kind": "windowed"}],
    "use_registers": [{"n_registers": 4}, {"n_registers": 0}],
    "num_tokens": [{"num_tokens": 4}, {"num_tokens": 16}, {"num_tokens": 64}],
    "grid_mode": [{"grid_mode": False}, {"grid_mode": True}],
    "feature_recon": [{"lam": 1.0}, {"lam": 0.0}],
    "share_mask_token": [{"share_mask_token": False}, {"share_mask_token": True}],
}


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--data", help="dataset directory written by gen-data (default: render in memory)")
    p.add_argument("--images-per-class", type=int, default=250)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vfmtok", description="Region-adaptive image tokenizer and AR generator at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic dataset to PPM files")
    _common(p)
    p.add_argument("--n-classes", type=int, default=8)

    p = sub.add_parser("train-tok", help="train the tokenizer")
    _common(p)
    p.add_argument("--steps", type=int, default=2000)

    p = sub.add_parser("tokenize", help="emit token datasets for the train and val splits")
    _common(p)

    p = sub.add_parser("train-ar", help="train the AR model on a token dataset")
    _common(p)
    p.add_argument("--tokens", help="token file (default: OUT/tokens_train.vftk)")
    p.add_argument("--steps", type=int, default=2000)

    p = sub.add_parser("generate", help="sample images from the AR model")
    _common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--class-id", type=int, default=None, help="default: cycle through classes")
    p.add_argument("--cfg-scale", type=float, default=1.0, help="1.0 = CFG-free")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)

    p = sub.add_parser("eval", help="recon MSE, toy Fréchet, codebook usage, CLS probe as one JSON object")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference suite over every primitive")
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("ablate", help="train and evaluate a named toggle matrix")
    _common(p)
    p.add_argument("--matrix", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--steps", type=int, default=300)
    return ap


# -- helpers ------------------------------------------------------------------
def _tok_config(args):
    from .io import read_config
    from .model import TokenizerConfig

    cfg = read_config(args.config, TokenizerConfig) if args.config else TokenizerConfig()
    return cfg.replace(seed=args.seed) if args.seed is not None else cfg


def _dataset(args):
    from .data import SyntheticDatasetSpec, gen_synthetic_dataset, load_dataset

    if args.data:
        return load_dataset(args.data)
    return gen_synthetic_dataset(SyntheticDatasetSpec(images_per_class=args.images_per_class))


def _require_ckpt(args):
    from .io import load_checkpoint

    if not args.ckpt:
        raise UsageError("--ckpt is required")
    if not os.path.exists(args.ckpt):
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    return load_checkpoint(args.ckpt)


def _emit(obj):
    print(json.dumps(obj))


# -- subcommands --------------------------------------------------------------
def cmd_gen_data(args):
    from .data import SyntheticDatasetSpec, gen_synthetic_dataset, save_dataset

    spec = SyntheticDatasetSpec(n_classes=args.n_classes, images_per_class=args.images_per_class,
                                seed=args.seed or 0)
    ds = gen_synthetic_dataset(spec)
    save_dataset(ds, args.out)
    _emit({"images": len(ds), "train": len(ds.train_idx), "val": len(ds.val_idx), "out": args.out})


def cmd_train_tok(args):
    from .io import MetricsWriter, model_checkpoint, save_checkpoint, write_config
    from .trainer import train_tokenizer

    cfg = _tok_config(args)
    xtr, _ = _dataset(args).train
    os.makedirs(args.out, exist_ok=True)
    write_config(os.path.join(args.out, "tokenizer_config.txt"), cfg)
    with MetricsWriter(os.path.join(args.out, "tokenizer_metrics.jsonl")) as mw:
        model = train_tokenizer(xtr, cfg, args.steps, metrics=mw, run_id="train-tok")
    path = os.path.join(args.out, "tokenizer.vfmt")
    save_checkpoint(path, model_checkpoint(model))
    _emit({"checkpoint": path, "steps": args.steps})


def cmd_tokenize(args):
    from .io import save_tokens, tokenizer_from_checkpoint

    model = tokenizer_from_checkpoint(_require_ckpt(args))
    ds = _dataset(args)
    os.makedirs(args.out, exist_ok=True)
    out = {}
    for split, (x, y) in (("train", ds.train), ("val", ds.val)):
        path = os.path.join(args.out, f"tokens_{split}.vftk")
        save_tokens(path, y, model.encode_indices(x), model.cfg.codebook_size)
        out[split] = path
    _emit(out)


def cmd_train_ar(args):
    from .ar import ARConfig, train_ar
    from .io import MetricsWriter, load_tokens, model_checkpoint, read_config, save_checkpoint, \
        tokenizer_from_checkpoint

    tokenizer = tokenizer_from_checkpoint(_require_ckpt(args))
    path = args.tokens or os.path.join(args.out, "tokens_train.vftk")
    if not os.path.exists(path):
        raise FileNotFoundError(f"token file not found: {path}")
    cls, idx, vocab = load_tokens(path)
    base = dict(vocab=vocab, n_classes=int(cls.max()) + 1, seq_len=idx.shape[1])
    cfg = read_config(args.config, ARConfig, **base) if args.config else ARConfig(**base)
    if args.seed is not None:
        cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    with MetricsWriter(os.path.join(args.out, "ar_metrics.jsonl")) as mw:
        model = train_ar(cls, idx, cfg, args.steps, metrics=mw, run_id="train-ar")
    out = os.path.join(args.out, "model.vfmt")
    save_checkpoint(out, model_checkpoint(tokenizer, model))
    _emit({"checkpoint": out, "steps": args.steps})


def cmd_generate(args):
    from .ar import SamplingConfig, sample_sequence
    from .data import write_ppm
    from .io import ar_from_checkpoint, save_tokens, tokenizer_from_checkpoint

    ckpt = _require_ckpt(args)
    tokenizer, ar = tokenizer_from_checkpoint(ckpt), ar_from_checkpoint(ckpt)
    if args.class_id is not None:
        classes = np.full(args.n, args.class_id)
    else:
        classes = np.arange(args.n) % ar.cfg.n_classes
    if classes.min() < 0 or classes.max() >= ar.cfg.n_classes:
        raise ContractError(f"class id outside [0, {ar.cfg.n_classes})")
    scfg = SamplingConfig(cfg_scale=args.cfg_scale, temperature=args.temperature, top_k=args.top_k,
                          seed=args.seed or 0)
    seqs = sample_sequence(ar, classes, scfg)
    images = tokenizer.decode_indices(seqs)
    img_dir = os.path.join(args.out, "samples")
    os.makedirs(img_dir, exist_ok=True)
    for i, img in enumerate(images):
        write_ppm(os.path.join(img_dir, f"{i:04d}_c{classes[i]}.ppm"), img)
    save_tokens(os.path.join(args.out, "samples.vftk"), classes, seqs, tokenizer.cfg.codebook_size)
    _emit({"samples": len(images), "dir": img_dir, "cfg_scale": args.cfg_scale})


def evaluate(tokenizer, ds, ar=None, n_gen: int = 500, seed: int = 0) -> dict:
    """Recon MSE, toy Fréchet of reconstructions, val usage, CLS probe; plus generation Fréchet with an AR model."""
    from .metrics import toy_frechet
    from .trainer import linear_probe_cls, measure_usage

    (xtr, ytr), (xv, yv) = ds.train, ds.val
    rec = tokenizer.reconstruct(xv)
    enc = tokenizer.frozen_encoder
    real = enc.pooled(xv.astype(tokenizer.dtype))
    out = {
        "mse": float(np.mean((rec.astype(np.float64) - xv) ** 2)),
        "frechet": toy_frechet(enc.pooled(rec.astype(tokenizer.dtype)), real),
        "usage": measure_usage(tokenizer, xv),
        "probe_acc": linear_probe_cls(tokenizer, (xtr, ytr), (xv, yv), seed),
    }
    if ar is not None:
        from .ar import SamplingConfig, sample_sequence

        classes = np.arange(n_gen) % ar.cfg.n_classes
        seqs = sample_sequence(ar, classes, SamplingConfig(seed=seed))
        gen = tokenizer.decode_indices(seqs)
        out["gen_frechet"] = toy_frechet(enc.pooled(gen.astype(tokenizer.dtype)), real)
    return out


def cmd_eval(args):
    from .io import ar_from_checkpoint, tokenizer_from_checkpoint

    ckpt = _require_ckpt(args)
    tokenizer = tokenizer_from_checkpoint(ckpt)
    ar = ar_from_checkpoint(ckpt) if "ar_config" in ckpt.meta else None
    _emit(evaluate(tokenizer, _dataset(args), ar, seed=args.seed or 0))


def cmd_gradcheck(args):
    from .suite import run_suite

    ok = run_suite(seeds=args.seeds, report=lambda s: print(s, flush=True))
    if not ok:
        raise NumericError("gradient check suite failed")


def cmd_ablate(args):
    from .io import MetricsWriter
    from .trainer import train_tokenizer

    base = _tok_config(args)
    ds = _dataset(args)
    os.makedirs(args.out, exist_ok=True)
    with MetricsWriter(os.path.join(args.out, f"ablate_{args.matrix}.jsonl")) as mw:
        for variant in ABLATIONS[args.matrix]:
            cfg = base.replace(**variant)
            name = ",".join(f"{k}={v}" for k, v in variant.items())
            model = train_tokenizer(ds.train[0], cfg, args.steps, metrics=mw, run_id=name,
                                    log_every=max(1, args.steps // 10))
            _emit({"variant": name, **evaluate(model, ds)})


COMMANDS = {
    "gen-data": cmd_gen_data, "train-tok": cmd_train_tok, "tokenize": cmd_tokenize, "train-ar": cmd_train_ar,
    "generate": cmd_generate, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        COMMANDS[args.command](args)
        return 0
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ContractError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
