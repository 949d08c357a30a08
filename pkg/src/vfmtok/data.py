"""Synthetic shape/hue image classes and PPM image I/O."""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .rng import Rng

SHAPES = ("disk", "square", "cross", "stripes")
HUES = (0.0, 0.6, 0.33, 0.8)


@dataclass
class SyntheticDatasetSpec:
    n_classes: int = 8
    images_per_class: int = 250
    image_size: int = 32
    seed: int = 0
    val_fraction: float = 0.1

    def class_definition(self, k: int):
        return SHAPES[k % len(SHAPES)], HUES[k // len(SHAPES)]


@dataclass
class SyntheticDataset:
    images: np.ndarray  # uint8 [N, H, W, 3]
    labels: np.ndarray  # int64 [N]
    train_idx: np.ndarray
    val_idx: np.ndarray
    spec: SyntheticDatasetSpec

    def __len__(self):
        return len(self.labels)

    def float_images(self, idx=None, dtype=np.float32) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(dtype) / 255.0

    @property
    def train(self):
        return self.float_images(self.train_idx), self.labels[self.train_idx]

    @property
    def val(self):
        return self.float_images(self.val_idx), self.labels[self.val_idx]


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, r: float, period: float) -> np.ndarray:
    soft = lambda sd: 1.0 / (1.0 + np.exp(np.clip(sd / 0.6, -50, 50)))  # noqa: E731 (0.6 px edge)
    if shape == "disk":
        return soft(np.sqrt(u * u + v * v) - r)
    if shape == "square":
        return soft(np.maximum(np.abs(u), np.abs(v)) - 0.85 * r)
    if shape == "cross":
        arm = r / 3.0
        sd = np.minimum(np.maximum(np.abs(u) - r, np.abs(v) - arm), np.maximum(np.abs(u) - arm, np.abs(v) - r))
        return soft(sd)
    if shape == "stripes":
        region = soft(np.maximum(np.abs(u), np.abs(v)) - r)
        stripe = 1.0 / (1.0 + np.exp(-6.0 * np.sin(2 * np.pi * u / period)))
        return region * stripe
    raise ConfigError(f"unknown shape {shape!r}")


def render_image(spec: SyntheticDatasetSpec, label: int, rng: Rng) -> np.ndarray:
    S = spec.image_size
    shape, hue = spec.class_definition(label)
    j = rng.uniform(9)
    cy = S / 2 + (j[0] - 0.5) * 0.3 * S
    cx = S / 2 + (j[1] - 0.5) * 0.3 * S
    r = (0.2 + 0.12 * j[2]) * S
    theta = j[3] * np.pi
    yy, xx = np.meshgrid(np.arange(S) + 0.5, np.arange(S) + 0.5, indexing="ij")
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _shape_mask(shape, u, v, r, period=0.22 * S)
    h = (hue + (j[4] - 0.5) * 0.06) % 1.0
    rgb = np.array(colorsys.hsv_to_rgb(h, 0.6 + 0.3 * j[5], 0.7 + 0.3 * j[6]))
    bg_level = 0.15 + 0.35 * j[7]
    bg = bg_level + 0.04 * rng.normal((S, S, 1)) + 0.02 * rng.normal((S, S, 3))
    img = bg * (1 - mask[..., None]) + rgb * mask[..., None]
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def gen_synthetic_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """Render ``n_classes * images_per_class`` images; seeded 90/10 train/val split."""
    if spec.n_classes < 2 or spec.n_classes > len(SHAPES) * len(HUES):
        raise ConfigError(f"n_classes must be in [2, {len(SHAPES) * len(HUES)}], got {spec.n_classes}")
    if spec.images_per_class < 1:
        raise ConfigError("images_per_class must be positive")
    root = Rng(spec.seed)
    n = spec.n_classes * spec.images_per_class
    labels = np.arange(n) % spec.n_classes
    images = np.stack([render_image(spec, int(labels[i]), root.spawn(i)) for i in range(n)])
    perm = root.spawn(n + 1).permutation(n)
    n_val = int(round(n * spec.val_fraction))
    return SyntheticDataset(images, labels.astype(np.int64), np.sort(perm[n_val:]), np.sort(perm[:n_val]), spec)


# -- PPM ---------------------------------------------------------------------
def write_ppm(path, image) -> None:
    """Binary P6, 8-bit; float input in [0,1] is rounded."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    H, W, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header at byte {pos}")
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise FormatError(f"{path}: not an 8-bit P6 file")
    W, H = int(fields[1]), int(fields[2])
    pos += 1
    body = raw[pos : pos + W * H * 3]
    if len(body) != W * H * 3:
        raise FormatError(f"{path}: pixel payload truncated at byte {pos + len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).copy()


def save_dataset(ds: SyntheticDataset, out_dir) -> None:
    """``images/NNNNNN.ppm`` plus ``labels.txt`` (``index label split`` per line)."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    val = set(ds.val_idx.tolist())
    with open(os.path.join(out_dir, "labels.txt"), "w") as fh:
        for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
            write_ppm(os.path.join(img_dir, f"{i:06d}.ppm"), img)
            fh.write(f"{i} {int(lab)} {'val' if i in val else 'train'}\n")


def load_dataset(out_dir) -> SyntheticDataset:
    path = os.path.join(out_dir, "labels.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset at {out_dir} (missing labels.txt)")
    rows = [line.split() for line in open(path) if line.strip()]
    images = np.stack([read_ppm(os.path.join(out_dir, "images", f"{int(r[0]):06d}.ppm")) for r in rows])
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    split = np.array([r[2] for r in rows])
    spec = SyntheticDatasetSpec(n_classes=int(labels.max()) + 1, image_size=images.shape[1])
    return SyntheticDataset(images, labels, np.flatnonzero(split == "train"), np.flatnonzero(split == "val"), spec)
