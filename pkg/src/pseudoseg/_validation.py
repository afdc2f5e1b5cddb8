"""Input validation helpers used by the estimators and CLI."""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import DataError, ShapeError


def check_image_stack(X, name="X", square=True) -> np.ndarray:
    """Coerce ``X`` to a float32 array of shape (N, H, W).

    Accepts (H, W), (N, H, W) or (N, 1, H, W) arrays, or a list of 2D arrays
    of equal shape.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have shape (N, H, W); got {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError(f"{name} is empty")
    if square and arr.shape[1] != arr.shape[2]:
        raise ShapeError(f"{name} must be square; got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_intensity_range(arr: np.ndarray, name="X", low=-1.0, high=1.0):
    lo, hi = float(arr.min()), float(arr.max())
    if lo < low - 1e-6 or hi > high + 1e-6:
        raise DataError(f"{name} must lie in [{low}, {high}]; got [{lo:.4g}, {hi:.4g}]")
    return arr


def check_binary(arr, name="mask") -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"{name} must be binary {{0, 1}}; found values {values[:5]}")
    return arr.astype(np.uint8)


def masks_to_signed(masks: np.ndarray) -> np.ndarray:
    """Map {0, 1} masks to the {-1, +1} range the adversarial networks use."""
    return masks.astype(np.float32) * 2.0 - 1.0


def signed_to_unit(x):
    return (x + 1.0) / 2.0


def to_tensor(arr: np.ndarray, device="cpu", dtype=torch.float32) -> torch.Tensor:
    """(N, H, W) array -> (N, 1, H, W) tensor."""
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype, device=device).unsqueeze(1)
