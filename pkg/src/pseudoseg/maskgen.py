"""Auxiliary mask sources: a parametric ellipse prior and external mask folders."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ConfigurationError, DataError

log = logging.getLogger(__name__)

MASK_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg", ".gif")


@dataclass
class EllipsePrior:
    """Ranges of the ellipse shape prior.

    ``minor_axis_mm`` is the full minor-axis length (a diameter, not a
    semi-axis); the fetal-head default is 25-105 mm.
    """

    minor_axis_mm: tuple = (25.0, 105.0)
    aspect_ratio: tuple = (1.2, 1.8)
    orientation: tuple = (0.0, 2 * math.pi)
    circle: bool = False

    def __post_init__(self):
        for name in ("minor_axis_mm", "aspect_ratio", "orientation"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigurationError(f"prior range {name}={lo, hi} is invalid")
            setattr(self, name, (float(lo), float(hi)))
        if self.minor_axis_mm[0] <= 0:
            raise ConfigurationError("minor_axis_mm must be positive")
        if self.aspect_ratio[0] < 1:
            raise ConfigurationError("aspect_ratio is major/minor and must be >= 1")
        if self.orientation[0] < 0 or self.orientation[1] > 2 * math.pi:
            raise ConfigurationError("orientation range must lie within [0, 2*pi]")

    @property
    def max_major_axis_mm(self):
        return self.minor_axis_mm[1] * (1.0 if self.circle else self.aspect_ratio[1])


@dataclass
class Canvas:
    size: int = 256
    pixel_size: float = 1.0  # mm per pixel

    @property
    def extent_mm(self):
        return self.size * self.pixel_size


@dataclass(frozen=True)
class EllipseParams:
    center_x: float  # pixels, continuous; pixel j spans [j, j + 1)
    center_y: float
    minor_axis: float  # mm, full length
    aspect_ratio: float
    orientation: float  # radians, angle of the major axis from +x

    def semi_axes_px(self, pixel_size):
        b = 0.5 * self.minor_axis / pixel_size
        return b * self.aspect_ratio, b

    def half_extents_px(self, pixel_size):
        a, b = self.semi_axes_px(pixel_size)
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        return math.hypot(a * c, b * s), math.hypot(a * s, b * c)


@dataclass
class ShapeMask:
    pixels: np.ndarray
    value_kind: str = "binary"
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise DataError(f"mask must be 2D, got shape {self.pixels.shape}")
        if self.value_kind == "binary":
            if not np.all(np.isin(self.pixels, (0, 1))):
                raise DataError("binary mask contains values other than 0 and 1")
        elif self.value_kind == "soft":
            if self.pixels.min() < 0 or self.pixels.max() > 1:
                raise DataError("soft mask values must lie in [0, 1]")
        else:
            raise ValueError(f"unknown value_kind {self.value_kind!r}")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class MaskSet:
    masks: list
    source: str = "generated"
    rng_seed: int | None = None
    params: list = field(default_factory=list)

    def __post_init__(self):
        if not self.masks:
            raise DataError("a MaskSet needs at least one mask")
        shapes = {m.shape for m in self.masks}
        if len(shapes) != 1:
            raise DataError(f"masks have mixed resolutions: {sorted(shapes)}")

    def __len__(self):
        return len(self.masks)

    @property
    def resolution(self):
        return self.masks[0].shape[0]

    def to_array(self) -> np.ndarray:
        return np.stack([m.pixels for m in self.masks]).astype(np.uint8)


def _check_fits(prior: EllipsePrior, canvas: Canvas):
    smallest = prior.minor_axis_mm[0] * (1.0 if prior.circle else prior.aspect_ratio[0])
    if smallest > canvas.extent_mm:
        raise ConfigurationError(
            f"canvas of {canvas.extent_mm:g} mm cannot hold even the smallest ellipse ({smallest:g} mm)")
    if prior.max_major_axis_mm > canvas.extent_mm:
        raise ConfigurationError(
            f"canvas of {canvas.extent_mm:g} mm cannot hold the largest ellipse "
            f"({prior.max_major_axis_mm:g} mm major axis); increase size or pixel_size")


def sample_ellipse_params(rng: np.random.Generator, prior: EllipsePrior, canvas: Canvas) -> EllipseParams:
    """Draw one ellipse from the prior, centred so that it lies fully inside the canvas."""
    _check_fits(prior, canvas)
    minor = rng.uniform(*prior.minor_axis_mm)
    aspect = 1.0 if prior.circle else rng.uniform(*prior.aspect_ratio)
    theta = rng.uniform(*prior.orientation)
    if theta >= 2 * math.pi:
        theta = 0.0
    shape = EllipseParams(0.0, 0.0, minor, aspect, theta)
    hx, hy = shape.half_extents_px(canvas.pixel_size)
    cx = rng.uniform(hx, canvas.size - hx)
    cy = rng.uniform(hy, canvas.size - hy)
    return EllipseParams(cx, cy, minor, aspect, theta)


def rasterize_ellipse(params: EllipseParams, canvas: Canvas) -> ShapeMask:
    """Binary mask whose pixels are set iff the pixel centre lies inside the ellipse."""
    a, b = params.semi_axes_px(canvas.pixel_size)
    centers = np.arange(canvas.size) + 0.5
    dx = centers[None, :] - params.center_x
    dy = centers[:, None] - params.center_y
    c, s = math.cos(params.orientation), math.sin(params.orientation)
    u = (dx * c + dy * s) / a
    v = (dy * c - dx * s) / b
    inside = u * u + v * v <= 1.0
    return ShapeMask(inside.astype(np.uint8), "binary", canvas.pixel_size)


def generate_mask_set(n: int, prior: EllipsePrior | None = None, canvas: Canvas | None = None,
                      seed: int = 0) -> MaskSet:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    prior = prior or EllipsePrior()
    canvas = canvas or Canvas()
    rng = np.random.default_rng(seed)
    params = [sample_ellipse_params(rng, prior, canvas) for _ in range(n)]
    masks = [rasterize_ellipse(p, canvas) for p in params]
    return MaskSet(masks, "generated", seed, params)


def _resize_nearest(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    return np.asarray(Image.fromarray(arr).resize((size, size), Image.NEAREST))


def binarize_mask_image(arr: np.ndarray) -> np.ndarray:
    """Scale by the image maximum and threshold at 0.5."""
    arr = np.asarray(arr, dtype=np.float64)
    peak = arr.max()
    if peak <= 0:
        return np.zeros(arr.shape, np.uint8)
    return (arr / peak >= 0.5).astype(np.uint8)


def read_grayscale(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I", "F"):
            return np.asarray(img, dtype=np.float64)
        return np.asarray(img.convert("L"), dtype=np.float64)


def load_auxiliary_masks(path, target_resolution: int, pixel_size: float = 1.0) -> MaskSet:
    """Load every readable image in ``path`` as a binary mask."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"mask directory {root} does not exist")
    masks = []
    for file in sorted(root.iterdir()):
        if file.suffix.lower() not in MASK_SUFFIXES:
            continue
        try:
            arr = read_grayscale(file)
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping unreadable mask {file.name}: {exc}", stacklevel=2)
            continue
        binary = binarize_mask_image(arr).astype(np.uint8)
        masks.append(ShapeMask(_resize_nearest(binary, target_resolution), "binary", pixel_size))
    if not masks:
        raise DataError(f"no readable masks in {root}")
    return MaskSet(masks, "external", None)


def write_mask_png(mask: np.ndarray, path):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def write_mask_set(mask_set: MaskSet, out_dir, prefix="mask") -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(mask_set.masks):
        p = out / f"{prefix}_{i:05d}.png"
        write_mask_png(m.pixels, p)
        paths.append(p)
    return paths
