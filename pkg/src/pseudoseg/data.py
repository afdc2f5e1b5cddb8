"""Image samples, the synthetic renderer, preprocessing and dataset splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import DataError
from .maskgen import MASK_SUFFIXES, ShapeMask, binarize_mask_image, read_grayscale

log = logging.getLogger(__name__)

MIN_INPUT_SIZE = 32


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray
    gt_mask: ShapeMask | None = None

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise DataError(f"sample {self.id}: image must be 2D, got {self.pixels.shape}")
        if self.pixels.min() < -1 - 1e-6 or self.pixels.max() > 1 + 1e-6:
            raise DataError(f"sample {self.id}: intensities outside [-1, 1]")

    def without_gt(self) -> "ImageSample":
        return replace(self, gt_mask=None)


@dataclass
class RenderConfig:
    foreground: float = 0.4
    background: float = -0.4
    blur_sigma: float = 1.5  # pixels
    noise_std: float = 0.25
    bias_amplitude: float = 0.3
    bias_scale: float = 0.25  # bias-field smoothing as a fraction of the image size


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int | None = None

    def ids(self):
        return {name: [s.id for s in getattr(self, name)] for name in ("train", "val", "test")}


def _bias_field(shape, cfg: RenderConfig, rng):
    if cfg.bias_amplitude == 0:
        return np.zeros(shape)
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), cfg.bias_scale * shape[0], mode="wrap")
    peak = np.abs(field_).max()
    return cfg.bias_amplitude * field_ / peak if peak > 0 else field_


def render_synthetic_image(mask: ShapeMask, cfg: RenderConfig | None = None,
                           rng: np.random.Generator | None = None, id: str = "synthetic") -> ImageSample:
    """Render a grayscale image of the structure outlined by ``mask``.

    Foreground/background intensities, Gaussian edge blur, an additive
    low-frequency bias field and Gaussian noise, clipped to [-1, 1]. The mask is attached as ground truth.
    """
    cfg = cfg or RenderConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    m = mask.pixels.astype(np.float64)
    if cfg.blur_sigma > 0:
        m = ndimage.gaussian_filter(m, cfg.blur_sigma, mode="nearest")
    img = cfg.background + (cfg.foreground - cfg.background) * m
    img = img + _bias_field(m.shape, cfg, rng)
    if cfg.noise_std > 0:
        img = img + cfg.noise_std * rng.standard_normal(m.shape)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    return ImageSample(id, img, mask)


def normalize_intensity(arr: np.ndarray) -> np.ndarray:
    """Linear min-max map to [-1, 1]; a constant image maps to 0."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0:
        return np.zeros(arr.shape, np.float32)
    return (2.0 * (arr - lo) / (hi - lo) - 1.0).astype(np.float32)


def _resize(arr, size, resample):
    mode_arr = arr.astype(np.float32) if resample == Image.BILINEAR else arr.astype(np.uint8)
    return np.asarray(Image.fromarray(mode_arr).resize((size, size), resample))


def preprocess(raw: np.ndarray, train_mode: bool = False, rng: np.random.Generator | None = None,
               resize_to: int = 288, crop: int = 256, id: str = "image",
               mask: np.ndarray | None = None) -> ImageSample:
    """Resize to ``resize_to`` (bilinear), crop to ``crop`` and rescale to [-1, 1].

    Training mode takes a random crop, evaluation mode the centre crop. An
    image that already has the crop size skips the geometric step, so the
    evaluation path is idempotent. ``mask``, if given, goes through the same
    geometry with nearest-neighbour resampling.
    """
    raw = np.asarray(raw)
    if raw.ndim == 3 and raw.shape[-1] in (3, 4):
        raw = raw[..., :3].mean(axis=-1)
    if raw.ndim != 2:
        raise DataError(f"{id}: expected a 2D grayscale image, got shape {raw.shape}")
    if min(raw.shape) < MIN_INPUT_SIZE:
        raise DataError(f"{id}: image {raw.shape} is smaller than {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
    if mask is not None:
        mask = binarize_mask_image(mask)
    if raw.shape != (crop, crop):
        img = _resize(raw, resize_to, Image.BILINEAR)
        if mask is not None:
            mask = _resize(mask, resize_to, Image.NEAREST)
        if train_mode:
            rng = rng if rng is not None else np.random.default_rng()
            top, left = (int(v) for v in rng.integers(0, resize_to - crop + 1, size=2))
        else:
            top = left = (resize_to - crop) // 2
        img = img[top:top + crop, left:left + crop]
        if mask is not None:
            mask = mask[top:top + crop, left:left + crop]
    else:
        img = raw
    gt = ShapeMask(np.ascontiguousarray(mask, dtype=np.uint8)) if mask is not None else None
    return ImageSample(id, normalize_intensity(img), gt)


def split_dataset(samples, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Shuffle and split; ground truth is stripped from the training part."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    samples = list(samples)
    n = len(samples)
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    ids = [s.id for s in samples]
    if len(set(ids)) != n:
        raise DataError("sample ids are not unique")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    train = [samples[i].without_gt() for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return DatasetSplit(train, val, test, seed)


def write_split_manifest(split: DatasetSplit, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split"])
        for name, ids in split.ids().items():
            writer.writerows((i, name) for i in ids)


def read_split_manifest(path) -> dict:
    with open(path, newline="") as fh:
        return {row["id"]: row["split"] for row in csv.DictReader(fh)}


def load_image_directory(root, resize_to=288, crop=256, train_mode=False, seed=0) -> list:
    """Read ``root/images/*`` and, when present, matching ``root/labels/*`` stems."""
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise DataError(f"{img_dir} does not exist")
    labels = {}
    if lbl_dir.is_dir():
        labels = {p.stem: p for p in lbl_dir.iterdir() if p.suffix.lower() in MASK_SUFFIXES}
    rng = np.random.default_rng(seed)
    samples = []
    for path in sorted(img_dir.iterdir()):
        if path.suffix.lower() not in MASK_SUFFIXES:
            continue
        raw = read_grayscale(path)
        mask = read_grayscale(labels[path.stem]) if path.stem in labels else None
        samples.append(preprocess(raw, train_mode, rng, resize_to, crop, path.stem, mask))
    if not samples:
        raise DataError(f"no images found in {img_dir}")
    return samples


def image_to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round((np.clip(pixels, -1, 1) + 1.0) * 127.5).astype(np.uint8)


def write_image_directory(samples, root):
    """Inverse of :func:`load_image_directory` for already-preprocessed samples."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(image_to_uint8(s.pixels)).save(root / "images" / f"{s.id}.png")
        if s.gt_mask is not None:
            (root / "labels").mkdir(exist_ok=True)
            Image.fromarray(s.gt_mask.pixels.astype(np.uint8) * 255).save(root / "labels" / f"{s.id}.png")


def stack_pixels(samples) -> np.ndarray:
    return np.stack([s.pixels for s in samples]).astype(np.float32)


def stack_gt(samples) -> np.ndarray:
    missing = [s.id for s in samples if s.gt_mask is None]
    if missing:
        raise DataError(f"{len(missing)} samples lack ground truth (e.g. {missing[0]})")
    return np.stack([s.gt_mask.pixels for s in samples]).astype(np.uint8)


@dataclass
class SyntheticCorpus:
    """Rendered samples plus the hidden ground truth of their training split."""

    split: DatasetSplit
    hidden_train_gt: dict = field(default_factory=dict)
