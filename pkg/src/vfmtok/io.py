"""On-disk formats: named-tensor checkpoints, token datasets, flat configs, JSON-lines metrics.

Checkpoint layout (little-endian)::

    b"VFMT" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype | u8 ndim | ndim x u32 dims | payload )

dtype 0 is float32; dtype 1 is raw bytes, used only for the ``meta.*``
entries that carry the model config as text.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

CKPT_MAGIC = b"VFMT"
CKPT_VERSION = 1
TOKENS_MAGIC = b"VFTK"
TOKENS_VERSION = 1
DTYPE_F32 = 0
DTYPE_BYTES = 1


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(ckpt.tensors) + len(ckpt.meta))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise FormatError(f"checkpoint entry {name} has dtype {arr.dtype}; only float32 is stored")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    for name, text in ckpt.meta.items():
        nb = ("meta." + name).encode("utf-8")
        payload = text.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BBI", DTYPE_BYTES, 1, len(payload)) + payload)
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def need(n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint: {what} needs {n} bytes at offset {pos}, file has {len(buf)}")

    need(12, "header")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at offset 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    pos = 12
    tensors, meta = {}, {}
    for _ in range(count):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 2, "name and dtype")
        try:
            name = buf[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid entry name at offset {pos}") from e
        pos += nlen
        dtype, ndim = buf[pos], buf[pos + 1]
        if dtype not in (DTYPE_F32, DTYPE_BYTES):
            raise FormatError(f"unknown dtype code {dtype} at offset {pos}")
        pos += 2
        need(4 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(dims, dtype=np.int64))
        if dtype == DTYPE_F32:
            need(4 * n, f"payload of {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
        else:
            need(n, f"payload of {name}")
            meta[name.removeprefix("meta.")] = buf[pos : pos + n].decode("utf-8")
            pos += n
    if pos != len(buf):
        raise FormatError(f"trailing bytes after last entry at offset {pos}")
    return Checkpoint(tensors, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


# -- flat key = value configs -------------------------------------------------
def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r}") from e
    return text


def config_to_text(cfg) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_text(cls, text: str, strict: bool = True, **overrides):
    """Build dataclass ``cls`` from ``key = value`` text; unknown keys raise unless ``strict`` is off."""
    raw = parse_config_text(text)
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown and strict:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {unknown}")
    kw = {k: _parse_value(v, getattr(defaults, k), k) for k, v in raw.items() if k in names}
    kw.update(overrides)
    return cls(**kw)


def read_config(path, cls, strict: bool = True, **overrides):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return config_from_text(cls, text, strict, **overrides)


def write_config(path, cfg) -> None:
    with open(path, "w") as f:
        f.write(config_to_text(cfg))


# -- token datasets -----------------------------------------------------------
def save_tokens(path, class_ids, indices, vocab: int) -> None:
    """``VFTK | u32 version | u32 T | u32 N | u32 count`` then ``(u32 class, T x u32)`` records."""
    idx = np.asarray(indices)
    cls = np.asarray(class_ids).reshape(-1)
    if idx.ndim != 2 or len(cls) != len(idx):
        raise FormatError(f"token records need [count, T] indices and one class each, got {idx.shape}, {cls.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise FormatError(f"token index outside [0, {vocab})")
    count, T = idx.shape
    rec = np.concatenate([cls[:, None], idx], axis=1).astype("<u4")
    with open(path, "wb") as f:
        f.write(TOKENS_MAGIC + struct.pack("<IIII", TOKENS_VERSION, T, vocab, count) + rec.tobytes())


def load_tokens(path):
    """Returns ``(class_ids [count], indices [count, T], vocab)``."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 20:
        raise FormatError(f"truncated token file: header needs 20 bytes, file has {len(buf)}")
    if buf[:4] != TOKENS_MAGIC:
        raise FormatError(f"bad token-file magic {buf[:4]!r} at offset 0")
    version, T, vocab, count = struct.unpack_from("<IIII", buf, 4)
    if version != TOKENS_VERSION:
        raise FormatError(f"unsupported token-file version {version} at offset 4")
    expect = 20 + 4 * (T + 1) * count
    if len(buf) != expect:
        raise FormatError(f"token file size {len(buf)} != {expect} implied by header at offset 8")
    rec = np.frombuffer(buf, dtype="<u4", offset=20).reshape(count, T + 1).astype(np.int64)
    if count and rec[:, 1:].max() >= vocab:
        raise FormatError("token index outside vocabulary")
    return rec[:, 0], rec[:, 1:], vocab


# -- metrics ------------------------------------------------------------------
class MetricsWriter:
    """Appends one JSON object per call; rejects non-increasing steps within a run."""

    def __init__(self, path=None, stream=None):
        self._f = open(path, "a") if path is not None else None
        self._stream = stream
        self._last = {}

    def __call__(self, record: dict):
        run, step = record.get("run_id"), record.get("step")
        if step is not None:
            if run in self._last and step <= self._last[run]:
                raise FormatError(f"metrics step {step} not increasing for run {run!r}")
            self._last[run] = step
        line = json.dumps(record, sort_keys=False)
        for f in (self._f, self._stream):
            if f is not None:
                f.write(line + "\n")
                f.flush()

    def close(self):
        if self._f is not None:
            self._f.close()
            self._f = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# -- model persistence --------------------------------------------------------
def model_checkpoint(tokenizer=None, ar=None) -> Checkpoint:
    """Tokenizer tensors at top level (``frozen_encoder.*``, ``quantizer.*`` ...), AR tensors under ``ar.*``."""
    ckpt = Checkpoint()
    if tokenizer is not None:
        ckpt.tensors.update(tokenizer.state_dict())
        ckpt.meta["tokenizer_config"] = config_to_text(tokenizer.cfg)
    if ar is not None:
        ckpt.tensors.update({f"ar.{k}": v for k, v in ar.state_dict().items()})
        ckpt.meta["ar_config"] = config_to_text(ar.cfg)
    return ckpt


def tokenizer_from_checkpoint(ckpt: Checkpoint):
    from .model import TokenizerConfig, VFMTokenizer

    if "tokenizer_config" not in ckpt.meta:
        raise FormatError("checkpoint carries no tokenizer config")
    model = VFMTokenizer(config_from_text(TokenizerConfig, ckpt.meta["tokenizer_config"]))
    model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("ar.")})
    return model


def ar_from_checkpoint(ckpt: Checkpoint):
    from .ar import ARConfig, ARModel

    if "ar_config" not in ckpt.meta:
        raise FormatError("checkpoint carries no AR model")
    model = ARModel(config_from_text(ARConfig, ckpt.meta["ar_config"]))
    model.load_state_dict(ckpt.subset("ar."))
    return model
