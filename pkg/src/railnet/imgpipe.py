"""Image ingestion, normalization, augmentation and dataset splitting.

Images are ``uint8`` arrays of shape (height, width, 3). The network input is
128x128x3 scaled to [0, 1].
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor

IMAGE_SIZE = 128
DEFAULT_NOISE_SIGMA = 8.0
SPLIT_FRACTIONS = (0.88, 0.06)  # train, test; validation takes the remainder


class ImageError(ValueError):
    pass


def check_image_u8(img: np.ndarray, size: Optional[int] = IMAGE_SIZE) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"expected a uint8 HxWx3 image, got {img.dtype} {img.shape}")
    if size is not None and img.shape[:2] != (size, size):
        raise ImageError(f"expected {size}x{size} pixels, got {img.shape[:2]}")
    return img


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise ImageError("zero-size image")
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return img[rows][:, cols]


def load_image(path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode a PNG or binary PPM into a ``size`` x ``size`` RGB uint8 array."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ImageError(f"{path}: unsupported image format {im.format}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as e:
        raise ImageError(f"{path}: cannot decode image ({e})") from None
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageError(f"{path}: zero-size image")
    if arr.shape[:2] != (size, size):
        arr = resize_nearest(arr, size, size)
    return np.ascontiguousarray(arr)


def normalize(img: np.ndarray) -> Tensor:
    img = check_image_u8(img, size=None)
    return Tensor(img.astype(np.float64)[None] / 255.0)


def load_normalize(path) -> Tensor:
    return normalize(load_image(path))


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(check_image_u8(img, size=None), mode="RGB").save(path, format="PNG")


# ----------------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    blur: bool = False
    noise_sigma: Optional[float] = None  # pixel units; None disables noise
    flip: Optional[str] = None  # "h" (mirror left-right) or "v" (upside down)
    rotate: int = 0  # counter-clockwise quarter turns
    seed: int = 42

    def __post_init__(self):
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.flip not in (None, "h", "v"):
            raise ValueError(f"flip must be 'h' or 'v', got {self.flip!r}")
        if self.rotate not in (0, 1, 2, 3):
            raise ValueError(f"rotate must be 0..3 quarter turns, got {self.rotate}")


def blur3(img: np.ndarray) -> np.ndarray:
    """3x3 binomial blur with edge clamping, rounded to the nearest byte."""
    x = np.pad(img.astype(np.int32), ((1, 1), (1, 1), (0, 0)), mode="edge")
    k = (1, 2, 1)
    rows = k[0] * x[:-2] + k[1] * x[1:-1] + k[2] * x[2:]
    acc = k[0] * rows[:, :-2] + k[1] * rows[:, 1:-1] + k[2] * rows[:, 2:]
    return ((acc + 8) // 16).astype(np.uint8)


def add_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    y = img.astype(np.float64) + rng.normal(0.0, sigma, img.shape)
    y = np.trunc(y + np.copysign(0.5, y))
    return np.clip(y, 0, 255).astype(np.uint8)


def augment(img: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Apply blur, noise, flip and rotation (in that order) as ``spec`` selects."""
    out = check_image_u8(img, size=None)
    if spec.blur:
        out = blur3(out)
    if spec.noise_sigma:
        out = add_noise(out, spec.noise_sigma, np.random.default_rng(spec.seed))
    if spec.flip == "h":
        out = out[:, ::-1]
    elif spec.flip == "v":
        out = out[::-1]
    if spec.rotate:
        out = np.rot90(out, spec.rotate, axes=(0, 1))
    return np.ascontiguousarray(out)


def random_spec(seed: int, sigma: float = DEFAULT_NOISE_SIGMA) -> AugmentSpec:
    """Draw a training-style augmentation from ``seed``."""
    rng = np.random.default_rng(seed)
    return AugmentSpec(
        blur=bool(rng.integers(2)),
        noise_sigma=sigma if rng.integers(2) else None,
        flip=(None, "h", "v")[int(rng.integers(3))],
        rotate=int(rng.integers(4)),
        seed=seed,
    )


# ----------------------------------------------------------------------------
# Dataset split
# ----------------------------------------------------------------------------

def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def split_sizes(n: int) -> tuple:
    n_train = _round_half_away(SPLIT_FRACTIONS[0] * n)
    n_test = _round_half_away(SPLIT_FRACTIONS[1] * n)
    return n_train, n_test, n - n_train - n_test


def split_dataset(paths: Sequence, seed: int = 42) -> tuple:
    """Shuffle sorted ``paths`` with a seeded Fisher-Yates; return (train, test, val)."""
    items = sorted(str(p) for p in paths)
    if len(items) < 3:
        raise ValueError(f"need at least 3 files to split, got {len(items)}")
    if len(set(items)) != len(items):
        raise ValueError("duplicate paths in dataset")
    random.Random(seed).shuffle(items)
    n_train, n_test, _ = split_sizes(len(items))
    return items[:n_train], items[n_train:n_train + n_test], items[n_train + n_test:]


def write_manifests(split: tuple, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, items in zip(("train", "test", "val"), split):
        p = out_dir / f"{name}.txt"
        p.write_text("".join(f"{s}\n" for s in items))
        written.append(p)
    return written


def list_images(data_dir) -> list:
    d = Path(data_dir)
    return sorted(p for p in d.iterdir()
                  if p.is_file() and p.suffix.lower() in (".png", ".ppm"))


# ----------------------------------------------------------------------------
# Synthetic track images
# ----------------------------------------------------------------------------

def synthetic_rail_image(rng: np.random.Generator, defect: Optional[bool] = None) -> np.ndarray:
    """A crude 128x128 track scene: ballast texture, two rails, optional damage."""
    s = IMAGE_SIZE
    if defect is None:
        defect = bool(rng.integers(2))
    base = rng.uniform(60, 160)
    img = base + rng.normal(0, rng.uniform(5, 30), (s, s, 3))
    img *= rng.uniform(0.8, 1.2, 3)  # colour cast
    yy, xx = np.mgrid[0:s, 0:s]
    gauge = rng.uniform(40, 70)
    centre = s / 2 + rng.uniform(-15, 15)
    tilt = rng.uniform(-0.15, 0.15)
    width = rng.uniform(5, 12)
    shine = rng.uniform(170, 250)
    for side in (-1, 1):
        x0 = centre + side * gauge / 2 + tilt * (yy - s / 2)
        img[np.abs(xx - x0) < width / 2] = shine
    if defect:
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, s), centre + rng.choice((-1, 1)) * gauge / 2
            r = rng.uniform(4, 14)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            img[mask] = rng.uniform(0, 60)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthetic_images(n: int, seed: int = 0) -> list:
    """``n`` normalized synthetic track images as model-ready tensors."""
    rng = np.random.default_rng(seed)
    return [normalize(synthetic_rail_image(rng)) for _ in range(n)]
