"""Dice, average symmetric surface distance and dataset-level reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import check_binary
from .exceptions import DataError


def dice_score(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    p = check_binary(pred, "pred").astype(bool)
    g = check_binary(gt, "gt").astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def mean_dice(preds, gts) -> float:
    return float(np.mean([dice_score(p, g) for p, g in zip(preds, gts)]))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background (outside counts as background)."""
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    interior = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return mask.astype(bool) & ~interior


def assd(pred, gt, spacing=1.0) -> float:
    """Average of the two directed mean boundary-to-boundary distances.

    Returns ``nan`` when either mask is empty. ``spacing`` is a scalar or a
    per-axis pair (row, column), e.g. mm per pixel.
    """
    p = check_binary(pred, "pred").astype(bool)
    g = check_binary(gt, "gt").astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        return math.nan
    sampling = (spacing, spacing) if np.isscalar(spacing) else tuple(spacing)
    bp, bg = boundary(p), boundary(g)
    to_g = ndimage.distance_transform_edt(~bg, sampling=sampling)
    to_p = ndimage.distance_transform_edt(~bp, sampling=sampling)
    return float(0.5 * (to_g[bp].mean() + to_p[bg].mean()))


@dataclass
class EvalRow:
    id: str
    dice: float
    assd: float | None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    spacing: float = 1.0

    @property
    def dice_values(self):
        return np.array([r.dice for r in self.rows], dtype=float)

    @property
    def assd_values(self):
        return np.array([r.assd for r in self.rows if r.assd is not None], dtype=float)

    @property
    def n_assd_excluded(self) -> int:
        return sum(r.assd is None for r in self.rows)

    def summary(self) -> dict:
        d, a = self.dice_values, self.assd_values
        return {
            "n": len(self.rows),
            "dice_mean": float(d.mean()) if len(d) else math.nan,
            "dice_std": float(d.std()) if len(d) else math.nan,
            "assd_mean": float(a.mean()) if len(a) else math.nan,
            "assd_std": float(a.std()) if len(a) else math.nan,
            "assd_excluded": self.n_assd_excluded,
            "spacing": self.spacing,
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "dice", "assd"])
            for r in self.rows:
                w.writerow([r.id, repr(r.dice), "" if r.assd is None else repr(r.assd)])

    def to_json(self, path):
        Path(path).write_text(json.dumps({"summary": self.summary(),
                                          "rows": [asdict(r) for r in self.rows]}, indent=2))


def report_from_masks(ids, preds, gts, spacing=1.0) -> EvalReport:
    rows = []
    for i, p, g in zip(ids, preds, gts):
        a = assd(p, g, spacing)
        rows.append(EvalRow(str(i), dice_score(p, g), None if math.isnan(a) else a))
    return EvalReport(rows, spacing)


def _predict_masks(model, X):
    if hasattr(model, "predict_proba"):
        proba = model.predict_proba(X)
    else:
        proba = model(X)
    return (np.asarray(proba) >= 0.5).astype(np.uint8)


def evaluate(model, samples, spacing=1.0) -> EvalReport:
    """Score a model on samples that carry ground truth.

    ``model`` is an estimator with ``predict_proba`` or a callable mapping an
    (N, H, W) image stack to foreground probabilities; outputs are thresholded
    at 0.5.
    """
    samples = list(samples)
    missing = [s.id for s in samples if s.gt_mask is None]
    if missing:
        raise DataError(f"evaluation needs ground truth; {len(missing)} samples lack it (e.g. {missing[0]})")
    X = np.stack([s.pixels for s in samples]).astype(np.float32)
    preds = _predict_masks(model, X)
    return report_from_masks([s.id for s in samples], preds, [s.gt_mask.pixels for s in samples], spacing)


def save_overlay(image, pred, gt, path, title=None):
    """PNG with prediction (green) and ground-truth (yellow) contours over the image."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(3, 3), dpi=100)
    ax.imshow(image, cmap="gray", vmin=-1, vmax=1)
    if np.any(gt):
        ax.contour(gt, levels=[0.5], colors="yellow", linewidths=1)
    if np.any(pred):
        ax.contour(pred, levels=[0.5], colors="lime", linewidths=1)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
