"""Stage 2: learning a segmentation network from noisy pseudo labels.

Label-quality sample selection keeps the pseudo labels the mask
discriminator found most realistic; iterative rounds then alternate between
training (optionally with the noise-weighted Dice loss) and re-predicting
the labels of every training image, stopping once validation Dice stops
improving.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import losses as L
from ._validation import check_binary, check_image_stack, check_intensity_range, to_tensor
from .exceptions import DataError, DivergenceError, ShapeError
from .metrics import mean_dice, report_from_masks
from .nets import NetConfig, build_generator, load_checkpoint, save_checkpoint
from .records import PseudoLabelRecord

log = logging.getLogger(__name__)

LOSSES = {"dice": L.dice_loss, "noise_weighted_dice": L.noise_weighted_dice_loss}


@dataclass
class LQSSConfig:
    keep_fraction: float = 0.75

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")


@dataclass
class IterConfig:
    max_rounds: int = 3
    epochs_per_round: int = 10
    loss: str = "noise_weighted_dice"
    patience: int = 1
    lr: float = 2e-4
    adam_betas: tuple = (0.9, 0.999)
    batch_size: int = 8
    reinit_each_round: bool = False
    validation: str = "gt"
    augment: bool = True

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if isinstance(self.loss, str) and self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if self.validation not in ("gt", "agreement"):
            raise ValueError("validation must be 'gt' or 'agreement'")


def lqss_select(records, cfg: LQSSConfig | float = 0.75) -> list:
    """Keep the ``floor(keep_fraction * N)`` records with the lowest quality scores.

    Lower scores look more real to the mask discriminator. Ties are broken
    by ``image_id`` so the selection is deterministic.
    """
    keep_fraction = cfg.keep_fraction if isinstance(cfg, LQSSConfig) else LQSSConfig(cfg).keep_fraction
    records = list(records)
    if not records:
        raise ValueError("lqss_select needs at least one record")
    n_keep = math.floor(keep_fraction * len(records) + 1e-9)
    return sorted(records, key=lambda r: (r.score, r.image_id))[:n_keep]


def build_segmenter(net: NetConfig) -> torch.nn.Module:
    return build_generator(net, "sigmoid")


def _resolve_loss(loss) -> Callable:
    return LOSSES[loss] if isinstance(loss, str) else loss


def _flip_pair(x, y, rng):
    if rng.random() < 0.5:
        x, y = x.flip(-1), y.flip(-1)
    if rng.random() < 0.5:
        x, y = x.flip(-2), y.flip(-2)
    return x, y


@torch.no_grad()
def predict_proba(model, images: np.ndarray, batch_size=16, device="cpu") -> np.ndarray:
    model.eval()
    x = to_tensor(images, device)
    out = torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    return out[:, 0].cpu().numpy()


def predict_masks(model, images, batch_size=16, device="cpu") -> np.ndarray:
    return (predict_proba(model, images, batch_size, device) >= 0.5).astype(np.uint8)


@dataclass
class RoundResult:
    train_loss: float
    val_dice: float
    val_assd: float


def train_round(model, images: np.ndarray, labels: np.ndarray, cfg: IterConfig,
                val_images=None, val_masks=None, rng: np.random.Generator | None = None,
                device="cpu", optimizer=None) -> RoundResult:
    """Train ``model`` in place for ``cfg.epochs_per_round`` epochs on (images, labels).

    ``cfg.loss`` is ``"dice"``, ``"noise_weighted_dice"`` or any callable
    ``loss(pred, target)``. Validation Dice/ASSD come from ``val_masks``
    (ground truth) when ``cfg.validation == "gt"``, otherwise from agreement
    with the training labels.
    """
    if len(images) == 0:
        raise DataError("train_round needs at least one selected sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss_fn = _resolve_loss(cfg.loss)
    opt = optimizer or torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas))
    x_all = to_tensor(images, device)
    y_all = to_tensor(labels, device)
    n = len(x_all)
    epoch_loss = math.nan
    for _ in range(cfg.epochs_per_round):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            if cfg.augment:
                x, y = _flip_pair(x, y, rng)
            loss = loss_fn(model(x), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite stage-2 loss ({loss.item()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        epoch_loss = total / n
    if cfg.validation == "gt" and val_images is not None and val_masks is not None:
        preds = predict_masks(model, val_images, device=device)
        report = report_from_masks(range(len(preds)), preds, val_masks)
        summary = report.summary()
        return RoundResult(epoch_loss, summary["dice_mean"], summary["assd_mean"])
    if cfg.validation == "gt":
        raise DataError("validation='gt' needs validation images with ground truth")
    preds = predict_masks(model, images, device=device)
    return RoundResult(epoch_loss, mean_dice(preds, labels), math.nan)


@dataclass
class RoundReport:
    round: int
    train_loss: float
    val_dice: float
    val_assd: float
    n_samples: int


def write_round_report(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "train_loss", "val_dice", "val_assd", "n_samples"])
        for r in rows:
            w.writerow([r.round, repr(r.train_loss), repr(r.val_dice), repr(r.val_assd), r.n_samples])


def iterative_train(images_by_id: dict, records, net: NetConfig, cfg: IterConfig,
                    lqss: LQSSConfig | None = None, val_images=None, val_masks=None, seed: int = 0,
                    device="cpu", train_round_fn=train_round, model=None):
    """Run up to ``cfg.max_rounds`` rounds of train -> re-predict.

    Round 1 trains on the LQSS selection of ``records``; every later round
    trains on the previous model's binarized predictions for all training
    images. Stops early once validation Dice fails to improve for
    ``cfg.patience`` consecutive rounds. Returns ``(best_model, reports,
    final_records)`` where ``best_model`` is the best-validation snapshot.
    """
    records = list(records)
    ids = [r.image_id for r in records]
    missing = [i for i in ids if i not in images_by_id]
    if missing:
        raise DataError(f"no image for {len(missing)} pseudo labels (e.g. {missing[0]})")
    all_images = np.stack([images_by_id[i] for i in ids]).astype(np.float32)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if model is None:
        model = build_segmenter(net).to(device)
    init_state = copy.deepcopy(model.state_dict())
    current = lqss_select(records, lqss or LQSSConfig())
    best_state, best_dice, stale = None, -math.inf, 0
    reports = []
    for k in range(1, cfg.max_rounds + 1):
        if k > 1 and cfg.reinit_each_round:
            model.load_state_dict(init_state)
        x = np.stack([images_by_id[r.image_id] for r in current]).astype(np.float32)
        y = np.stack([r.mask for r in current]).astype(np.float32)
        result = train_round_fn(model, x, y, cfg, val_images, val_masks, rng, device)
        reports.append(RoundReport(k, result.train_loss, result.val_dice, result.val_assd, len(current)))
        log.info("stage2 round %d: loss=%.4f val_dice=%.4f n=%d", k, result.train_loss, result.val_dice,
                 len(current))
        if result.val_dice > best_dice:
            best_dice, best_state, stale = result.val_dice, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if k < cfg.max_rounds:
            preds = predict_masks(model, all_images, device=device)
            current = [PseudoLabelRecord(i, p, math.nan, k) for i, p in zip(ids, preds)]
    model.load_state_dict(best_state)
    return model, reports, current


class NoisyLabelSegmenter(BaseEstimator):
    """Segmentation network trained from noisy pseudo labels.

    Parameters
    ----------
    net : NetConfig
    config : IterConfig
        Rounds, epochs per round, loss (``"noise_weighted_dice"`` or ``"dice"``).
    lqss : LQSSConfig
        Fraction of pseudo labels kept before the first round.
    random_state : int

    Attributes
    ----------
    model_ : torch.nn.Module
        Best-validation snapshot.
    rounds_ : list of RoundReport
    selected_ids_ : list of str
        Ids kept by sample selection.
    """

    def __init__(self, net=None, config=None, lqss=None, random_state=0, device="cpu"):
        self.net = net
        self.config = config
        self.lqss = lqss
        self.random_state = random_state
        self.device = device

    def _validate_images(self, X, name="X"):
        X = check_intensity_range(check_image_stack(X, name), name)
        size = (self.net or NetConfig()).image_size
        if X.shape[-1] != size:
            raise ShapeError(f"{name} has resolution {X.shape[-1]}, expected {size}")
        return X

    def fit(self, X, y, scores=None, ids=None, X_val=None, y_val=None):
        """``X`` images in [-1, 1], ``y`` binary pseudo labels, ``scores`` their
        quality scores (all equal when omitted, which makes selection keep the
        first ids). ``X_val``/``y_val`` carry ground truth for round validation."""
        X = self._validate_images(X)
        y = check_binary(check_image_stack(y, "y"), "y")
        if len(y) != len(X):
            raise DataError(f"{len(X)} images but {len(y)} pseudo labels")
        ids = [f"{i:05d}" for i in range(len(X))] if ids is None else [str(i) for i in ids]
        scores = np.zeros(len(X)) if scores is None else np.asarray(scores, dtype=float)
        records = [PseudoLabelRecord(i, m, float(s), 0) for i, m, s in zip(ids, y, scores)]
        return self.fit_records(dict(zip(ids, X)), records, X_val, y_val)

    def fit_records(self, images_by_id: dict, records, X_val=None, y_val=None):
        net = self.net or NetConfig()
        cfg = self.config or IterConfig()
        lqss = self.lqss or LQSSConfig()
        if X_val is not None:
            X_val = self._validate_images(X_val, "X_val")
            y_val = check_binary(check_image_stack(y_val, "y_val"), "y_val")
        self.selected_ids_ = [r.image_id for r in lqss_select(records, lqss)]
        self.model_, self.rounds_, self.final_records_ = iterative_train(
            images_by_id, records, net, cfg, lqss, X_val, y_val, self.random_state, self.device)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, self._validate_images(X), device=self.device)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean Dice of the binarized predictions against ``y``."""
        return mean_dice(self.predict(X), check_binary(check_image_stack(y, "y"), "y"))

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, extra={"rounds": [asdict(r) for r in self.rounds_],
                                                  "net": asdict(self.net or NetConfig())})

    @classmethod
    def load(cls, path, device="cpu"):
        model, payload = load_checkpoint(path, device)
        net = NetConfig(**payload["extra"]["net"])
        est = cls(net=net, device=device)
        est.model_ = model
        est.rounds_ = [RoundReport(**r) for r in payload["extra"]["rounds"]]
        return est
