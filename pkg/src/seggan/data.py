"""Dataset ingestion, synthetic sample generation and batching.

Images become (1, H, W) tensors in [0, 1]; masks become (1, H, W) tensors
with exact {0, 1} values (0 = background, 1 = damage).  PGM/PPM are parsed
and written natively so the core stays decoder-free and bit-exact; PNG is
accepted behind an optional Pillow boundary.

Masks are always resized nearest-neighbor and re-thresholded at the midpoint:
interpolation would manufacture fractional labels the loss does not expect as
hard ground truth.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

try:  # optional decoder boundary; PGM/PPM never need it
    from PIL import Image as _PILImage

    _HAVE_PIL = True
except ImportError:  # pragma: no cover
    _HAVE_PIL = False

__all__ = [
    "SegmentationSample",
    "DatasetManifest",
    "load_sample",
    "generate_synthetic",
    "make_synthetic_dataset",
    "batch_iterator",
    "read_image",
    "write_pgm",
    "load_manifest",
    "save_manifest",
    "load_dataset",
]

SPLITS = ("train", "test")


@dataclass
class SegmentationSample:
    """One (image, mask) pair ready for the networks."""

    image: Tensor
    mask: Tensor
    source_id: str = ""

    def validate(self) -> "SegmentationSample":
        if self.image.shape != self.mask.shape:
            raise ShapeError(f"image {self.image.shape} vs mask {self.mask.shape}")
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ShapeError(f"expected (1, H, W), got {self.image.shape}")
        h, w = self.image.shape[1:]
        if h % 16 or w % 16:
            raise ShapeError(f"H and W must be divisible by 16, got {(h, w)}")
        img = self.image.data
        if img.min() < 0 or img.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        m = self.mask.data
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        return self


@dataclass
class DatasetManifest:
    """(image path, mask path, split) triples backing a dataset on disk."""

    entries: list[tuple[str, str, str]]

    def split(self, tag: str) -> list[tuple[str, str]]:
        if tag not in SPLITS:
            raise ValueError(f"unknown split {tag!r}")
        return [(img, mask) for img, mask, s in self.entries if s == tag]

    def validate(self) -> "DatasetManifest":
        seen = set()
        for img, mask, s in self.entries:
            if s not in SPLITS:
                raise ValueError(f"unknown split tag {s!r} for {img}")
            if img in seen:
                raise ValueError(f"image {img} listed twice; splits must be disjoint")
            seen.add(img)
        return self


# ---------------------------------------------------------------------------
# PNM (PGM/PPM) codec + optional PNG
# ---------------------------------------------------------------------------


def _read_pnm(path: str) -> np.ndarray:
    """Read P2/P3/P5/P6 into (H, W) or (H, W, 3) float in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 2 or data[0:1] != b"P":
        raise ValueError(f"{path}: not a PNM file")
    magic = data[:2].decode("ascii", "replace")
    if magic not in ("P2", "P3", "P5", "P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")

    # Header tokens may be interleaved with '#' comments.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PNM header")
        tokens.append(int(data[start:pos]))
    width, height, maxval = tokens
    if maxval < 1 or maxval > 65535:
        raise ValueError(f"{path}: bad maxval {maxval}")
    channels = 3 if magic in ("P3", "P6") else 1
    count = width * height * channels

    if magic in ("P2", "P3"):
        values = np.array(data[pos:].split()[:count], dtype=np.int64)
        if values.size != count:
            raise ValueError(f"{path}: expected {count} samples, got {values.size}")
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        values = raw.astype(np.int64)
    arr = values.reshape((height, width, 3) if channels == 3 else (height, width))
    return arr.astype(np.float64) / maxval


def write_pgm(path: str, gray: np.ndarray, comments=()) -> None:
    """Write a (H, W) uint8 array as binary PGM with optional '#' comments."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ShapeError(f"write_pgm expects (H, W), got {gray.shape}")
    header = ["P5"]
    header.extend(f"# {c}" for c in comments)
    header.append(f"{gray.shape[1]} {gray.shape[0]}")
    header.append("255")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(gray.tobytes())


def read_image(path: str) -> np.ndarray:
    """Decode an image file into (H, W) or (H, W, 3) float in [0, 1]."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        return _read_pnm(path)
    if ext == ".png":
        if not _HAVE_PIL:
            raise RuntimeError("PNG support needs Pillow (install the 'png' extra)")
        with _PILImage.open(path) as im:
            im = im.convert("RGB")
            return np.asarray(im, dtype=np.float64) / 255.0
    raise ValueError(f"unsupported image format {ext!r} (use .pgm/.ppm or .png)")


def _nearest_resize(arr: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return arr[rows][:, cols]


def load_sample(image_file: str, mask_file: str, target_size: int) -> SegmentationSample:
    """Load and normalize one (image, mask) pair.

    Color inputs are collapsed to one channel by averaging the channels, then
    resized nearest-neighbor to (target_size, target_size) and scaled into
    [0, 1].  The mask goes through the same resize and is thresholded at the
    midpoint; a mask that was not two-level to begin with gets a warning.
    """
    if target_size % 16:
        raise ValueError(f"target_size must be divisible by 16, got {target_size}")
    img = read_image(image_file)
    if img.ndim == 3:
        img = img.mean(axis=2)
    img = np.clip(_nearest_resize(img, target_size, target_size), 0.0, 1.0)

    mask = read_image(mask_file)
    if mask.ndim == 3:
        mask = mask.mean(axis=2)
    levels = np.unique(mask)
    if levels.size > 2:
        warnings.warn(f"{mask_file}: {levels.size} gray levels before thresholding", stacklevel=2)
    mask = (_nearest_resize(mask, target_size, target_size) >= 0.5).astype(np.float64)

    return SegmentationSample(
        image=Tensor(img[None, :, :]),
        mask=Tensor(mask[None, :, :]),
        source_id=os.path.splitext(os.path.basename(image_file))[0],
    ).validate()


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_STYLE_CODES = {"blobs": 0, "cells": 1}


def _textured_background(rng, size, level, amplitude):
    coarse = rng.uniform(-amplitude, amplitude, size=(size // 8, size // 8))
    coarse = coarse.repeat(8, axis=0).repeat(8, axis=1)
    fine = rng.normal(0.0, amplitude / 3.0, size=(size, size))
    return level + coarse + fine


def _ellipse_field(rng, size, min_axis=0.06, max_axis=0.27):
    """Normalized quadratic-form distance of every pixel to a random ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    a = rng.uniform(min_axis, max_axis) * size
    b = rng.uniform(min_axis, max_axis) * size
    theta = rng.uniform(0.0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    return np.sqrt(u * u + v * v)


def _blob_sample(rng, size):
    """Spall-like filled regions over a textured wall."""
    image = _textured_background(rng, size, rng.uniform(0.45, 0.65), 0.06)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        mask |= _ellipse_field(rng, size) <= 1.0
    depth = rng.uniform(0.25, 0.4)
    image = image - depth * mask
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def _cell_sample(rng, size):
    """Ring outlines (cell-wall-like) with small interior specks as noise objects."""
    image = _textured_background(rng, size, rng.uniform(0.7, 0.85), 0.04)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        d = _ellipse_field(rng, size, min_axis=0.12, max_axis=0.3)
        thickness = rng.uniform(0.05, 0.1)
        ring = np.abs(d - 1.0) <= thickness
        mask |= ring
        # organelle-like specks inside the ring: image clutter, never labeled
        interior = d < 1.0 - thickness
        specks = rng.random(size=(size, size)) < 0.01
        image = np.where(interior & specks, image - 0.25, image)
    image = image - 0.35 * mask
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def generate_synthetic(count: int, size: int, seed: int, style: str = "blobs"):
    """Deterministic synthetic dataset; sample i depends only on (seed, style, i).

    The mask is derived from the same geometry that rasterizes the image, so
    the ground truth is exact.  Samples whose foreground fraction falls
    outside (0.02, 0.6) are rejected and redrawn.
    """
    if style not in _STYLE_CODES:
        raise ValueError(f"unknown style {style!r}; choose from {sorted(_STYLE_CODES)}")
    if size % 16:
        raise ValueError(f"size must be divisible by 16, got {size}")
    draw = _blob_sample if style == "blobs" else _cell_sample
    samples = []
    for i in range(count):
        rng = np.random.default_rng([int(seed), _STYLE_CODES[style], i])
        for _ in range(100):
            image, mask = draw(rng, size)
            frac = mask.mean()
            if 0.02 < frac < 0.6:
                break
        else:  # pragma: no cover - generator parameters keep this unreachable
            raise RuntimeError("synthetic generator failed to hit the foreground window")
        samples.append(
            SegmentationSample(
                image=Tensor(image[None]),
                mask=Tensor(mask.astype(np.float64)[None]),
                source_id=f"{style}-{i:03d}",
            ).validate()
        )
    return samples


def make_synthetic_dataset(style: str, train_count: int, test_count: int, size: int, seed: int):
    """Train/test lists; sample identity is index-stable, so splits never overlap."""
    allsamples = generate_synthetic(train_count + test_count, size, seed, style)
    return allsamples[:train_count], allsamples[train_count:]


# ---------------------------------------------------------------------------
# Manifest + batching
# ---------------------------------------------------------------------------


def load_manifest(path: str) -> DatasetManifest:
    """Parse 'image<TAB>mask<TAB>split' lines; '#' starts a comment."""
    entries = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            img, mask, split = parts
            entries.append(
                (
                    img if os.path.isabs(img) else os.path.join(base, img),
                    mask if os.path.isabs(mask) else os.path.join(base, mask),
                    split,
                )
            )
    return DatasetManifest(entries).validate()


def save_manifest(path: str, entries, comments=()) -> None:
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        for img, mask, split in entries:
            fh.write(f"{img}\t{mask}\t{split}\n")


def load_dataset(manifest: DatasetManifest, target_size: int, split: str = "train"):
    pairs = manifest.split(split)
    return [load_sample(img, mask, target_size) for img, mask in pairs]


def batch_iterator(dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield lists of samples covering the dataset once; partial tail included.

    A generator shuffles the order (advancing its state, so successive epochs
    differ); None keeps manifest order.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    for start in range(0, len(dataset), batch_size):
        yield [dataset[i] for i in order[start : start + batch_size]]
