"""Stage 1: shape-VAE pretraining and cycle-consistent adversarial training of
the image -> mask translator, followed by pseudo-label export."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import losses as L
from ._validation import (check_binary, check_image_stack, check_intensity_range, masks_to_signed,
                          signed_to_unit, to_tensor)
from .dgcc import DGCC, RecurrentTrace, recurrent_generate
from .exceptions import DataError, DivergenceError, ShapeError
from .nets import (NetConfig, ShapeVAE, build_generator, build_latent_discriminator,
                   build_patch_discriminator, build_vae, load_checkpoint, save_checkpoint)
from .records import PseudoLabelRecord

log = logging.getLogger(__name__)

NETWORK_NAMES = ("G_A", "G_B", "dgcc", "D_A", "D_B", "D_VAE")
GENERATOR_NAMES = ("G_A", "G_B", "dgcc")
DISCRIMINATOR_NAMES = ("D_A", "D_B", "D_VAE")

LOG_COLUMNS = ("epoch", "step", "lr", "cycle_image", "cycle_mask", "adv_mask", "adv_image", "vae_g",
               "loss_g", "d_image", "d_mask", "d_vae")


@dataclass
class VAEPretrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    kl_weight: float = 1.0
    augment: bool = True


@dataclass
class Stage1Config:
    epochs_flat: int = 50
    epochs_decay: int = 100
    lr: float = 5e-6
    adam_betas: tuple = (0.5, 0.999)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    dgcc_turns: int = 2
    batch_size: int = 1
    steps_per_epoch: int | None = None
    pool_size: int = 50
    label_convention: str = "paper"
    checkpoint_every: int = 0
    vae: VAEPretrainConfig = field(default_factory=VAEPretrainConfig)

    @property
    def total_epochs(self):
        return self.epochs_flat + self.epochs_decay


def lr_at_epoch(epoch: int, lr: float, epochs_flat: int, epochs_decay: int) -> float:
    """Constant ``lr`` for epochs 1..epochs_flat, then linear decay reaching 0
    after ``epochs_decay`` more epochs. Epochs are 1-indexed."""
    if epoch <= epochs_flat:
        return lr
    k = epoch - epochs_flat
    if k >= epochs_decay:
        return 0.0
    return lr * (1 - k / epochs_decay)


def _dihedral(batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    k = int(rng.integers(4))
    batch = torch.rot90(batch, k, dims=(-2, -1))
    return torch.flip(batch, dims=(-1,)) if rng.random() < 0.5 else batch


def pretrain_vae(masks, net: NetConfig, cfg: VAEPretrainConfig | None = None, seed: int = 0,
                 history: list | None = None, device="cpu") -> ShapeVAE:
    """Fit the shape VAE on binary auxiliary masks, then freeze it.

    ``masks`` is an (N, H, W) {0, 1} array. Per-epoch ``loss``, ``mse`` and
    ``kl`` means are appended to ``history`` when given.
    """
    cfg = cfg or VAEPretrainConfig()
    masks = check_binary(check_image_stack(masks, "masks"), "masks")
    if masks.shape[-1] != net.image_size:
        raise ShapeError(f"masks are {masks.shape[-1]} px but the network expects {net.image_size}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    vae = build_vae(net).to(device)
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.lr)
    data = to_tensor(masks_to_signed(masks), device)
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        totals = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = _dihedral(batch, rng)
            recon, mean, logvar = vae(batch)
            kl = L.kl_standard_normal(mean, logvar)
            mse = ((recon - batch) ** 2).mean()
            loss = mse + cfg.kl_weight * kl
            if not torch.isfinite(loss):
                raise DivergenceError(f"VAE pretraining diverged at epoch {epoch} (mse={mse.item()}, kl={kl.item()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += len(batch) * np.array([loss.item(), mse.item(), kl.item()])
        if history is not None:
            history.append(dict(zip(("epoch", "loss", "mse", "kl"), (epoch, *(totals / n)))))
    return freeze(vae)


def freeze(module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class ImagePool:
    """Buffer of past generated samples for discriminator updates."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.items = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for item in batch.detach():
            item = item.clone().unsqueeze(0)
            if len(self.items) < self.size:
                self.items.append(item)
                out.append(item)
            elif self.rng.random() < 0.5:
                idx = int(self.rng.integers(self.size))
                out.append(self.items[idx])
                self.items[idx] = item
            else:
                out.append(item)
        return torch.cat(out)


class MetricsLog:
    """Append-only CSV of per-step losses; floats written with full precision."""

    def __init__(self, path, columns=LOG_COLUMNS):
        self.path = Path(path) if path is not None else None
        self.columns = columns
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def write(self, row: dict):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.columns)


class Stage1Trainer:
    """Owns the five adversarial networks, the DGCC module and their optimizers.

    Each :meth:`train_step` is a generator update (discriminator weights
    frozen) followed by a discriminator update (on detached fakes).
    """

    def __init__(self, net: NetConfig, cfg: Stage1Config, vae: ShapeVAE, seed: int = 0, device="cpu"):
        self.net, self.cfg, self.seed, self.device = net, cfg, seed, device
        torch.manual_seed(seed)
        self.G_A = build_generator(net, "tanh").to(device)
        self.G_B = build_generator(net, "tanh").to(device)
        self.D_A = build_patch_discriminator(net).to(device)
        self.D_B = build_patch_discriminator(net).to(device)
        self.dgcc = DGCC(self.D_B.embedding_channels, self.G_A.decoder_channels, net.dgcc_reduction).to(device)
        self.D_VAE = build_latent_discriminator(net).to(device)
        self.vae = freeze(vae.to(device))
        self.optimizers = {
            name: torch.optim.Adam(getattr(self, name).parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas))
            for name in NETWORK_NAMES
        }
        self.rng = np.random.default_rng(seed)
        self.pool_image = ImagePool(cfg.pool_size, self.rng)
        self.pool_mask = ImagePool(cfg.pool_size, self.rng)
        self.epoch = 0
        self.step = 0
        self.history = []

    def networks(self, names=NETWORK_NAMES):
        return [getattr(self, n) for n in names]

    def translate_to_mask(self, images, turns=None, trace=None):
        turns = self.cfg.dgcc_turns if turns is None else turns
        return recurrent_generate(images, self.G_A, self.D_B, self.dgcc, turns, trace)

    def set_lr(self, lr):
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def _zero_grad(self, names):
        for n in names:
            self.optimizers[n].zero_grad(set_to_none=True)

    def _step(self, names):
        for n in names:
            self.optimizers[n].step()

    def _check(self, losses: dict):
        bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
        if bad:
            raise DivergenceError(f"non-finite loss at epoch {self.epoch}, step {self.step}: {bad}")

    def generator_step(self, real_image, real_mask):
        w, conv = self.cfg.weights, self.cfg.label_convention
        for d in self.networks(DISCRIMINATOR_NAMES):
            d.requires_grad_(False)
        self._zero_grad(GENERATOR_NAMES)
        fake_mask = self.translate_to_mask(real_image)
        rec_image = self.G_B(fake_mask)
        fake_image = self.G_B(real_mask)
        rec_mask = self.translate_to_mask(fake_image)
        cycle_image = L.cycle_loss(real_image, rec_image)
        cycle_mask = L.cycle_loss(real_mask, rec_mask)
        adv_mask = L.lsgan_g_loss(self.D_B(fake_mask), conv)
        adv_image = L.lsgan_g_loss(self.D_A(fake_image), conv)
        z_fake = self.vae.encode(fake_mask)[2]
        vae_g = L.vae_adv_loss_g(self.D_VAE(z_fake), conv)
        loss = (w.lambda_cycle * (cycle_image + cycle_mask) + w.lambda_adv * (adv_mask + adv_image)
                + w.lambda_vae * vae_g)
        stats = {"cycle_image": cycle_image, "cycle_mask": cycle_mask, "adv_mask": adv_mask,
                 "adv_image": adv_image, "vae_g": vae_g, "loss_g": loss}
        stats = {k: v.item() for k, v in stats.items()}
        self._check(stats)
        loss.backward()
        self._step(GENERATOR_NAMES)
        for d in self.networks(DISCRIMINATOR_NAMES):
            d.requires_grad_(True)
        return stats, fake_image.detach(), fake_mask.detach()

    def discriminator_step(self, real_image, real_mask, fake_image, fake_mask):
        conv = self.cfg.label_convention
        self._zero_grad(DISCRIMINATOR_NAMES)
        fake_image = self.pool_image.query(fake_image)
        fake_mask = self.pool_mask.query(fake_mask)
        d_image = L.lsgan_d_loss(self.D_A(real_image), self.D_A(fake_image), conv)
        d_mask = L.lsgan_d_loss(self.D_B(real_mask), self.D_B(fake_mask), conv)
        with torch.no_grad():
            z_real = self.vae.encode(real_mask)[2]
            z_fake = self.vae.encode(fake_mask)[2]
        d_vae = L.vae_adv_loss_d(self.D_VAE(z_fake), self.D_VAE(z_real), conv)
        stats = {"d_image": d_image.item(), "d_mask": d_mask.item(), "d_vae": d_vae.item()}
        self._check(stats)
        (d_image + d_mask + d_vae).backward()
        self._step(DISCRIMINATOR_NAMES)
        return stats

    def train_step(self, real_image, real_mask):
        for m in self.networks():
            m.train()
        g_stats, fake_image, fake_mask = self.generator_step(real_image, real_mask)
        d_stats = self.discriminator_step(real_image, real_mask, fake_image, fake_mask)
        self.step += 1
        return {**g_stats, **d_stats}

    def train(self, images: np.ndarray, masks: np.ndarray, epochs: int | None = None,
              metrics_log: MetricsLog | None = None, on_epoch_end=None, checkpoint_dir=None):
        """Train on signed (N, H, W) images and signed (M, H, W) masks.

        Images are visited in a fresh random order each epoch; each step pairs
        them with masks drawn independently at random.
        """
        cfg = self.cfg
        imgs = to_tensor(images, self.device)
        msks = to_tensor(masks, self.device)
        n, bs = len(imgs), cfg.batch_size
        steps = cfg.steps_per_epoch or math.ceil(n / bs)
        last = cfg.total_epochs if epochs is None else min(cfg.total_epochs, self.epoch + epochs)
        while self.epoch < last:
            self.epoch += 1
            lr = lr_at_epoch(self.epoch, cfg.lr, cfg.epochs_flat, cfg.epochs_decay)
            self.set_lr(lr)
            order = np.concatenate([self.rng.permutation(n) for _ in range(math.ceil(steps * bs / n))])
            sums = {}
            for i in range(steps):
                idx = order[i * bs:(i + 1) * bs]
                mask_idx = self.rng.integers(len(msks), size=len(idx))
                stats = self.train_step(imgs[idx], msks[mask_idx])
                for k, v in stats.items():
                    sums[k] = sums.get(k, 0.0) + v
                if metrics_log is not None:
                    metrics_log.write({"epoch": self.epoch, "step": self.step, "lr": lr, **stats})
            record = {"epoch": self.epoch, "lr": lr, **{k: v / steps for k, v in sums.items()}}
            self.history.append(record)
            if on_epoch_end is not None:
                on_epoch_end(self, record)
            if checkpoint_dir is not None and cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                self.save(checkpoint_dir)
        return self

    # --- persistence -------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in NETWORK_NAMES:
            save_checkpoint(d / f"{name}.pt", getattr(self, name), self.optimizers[name], self.epoch)
        save_checkpoint(d / "vae.pt", self.vae, None, self.epoch)
        torch.save({"step": self.step, "epoch": self.epoch, "rng": self.rng.bit_generator.state,
                    "torch_rng": torch.get_rng_state(), "pool_image": self.pool_image.items,
                    "pool_mask": self.pool_mask.items, "history": self.history}, d / "trainer_state.pt")

    @classmethod
    def load(cls, directory, net: NetConfig, cfg: Stage1Config, seed=0, device="cpu"):
        d = Path(directory)
        vae, _ = load_checkpoint(d / "vae.pt", device)
        trainer = cls(net, cfg, vae, seed, device)
        for name in NETWORK_NAMES:
            module, payload = load_checkpoint(d / f"{name}.pt", device)
            getattr(trainer, name).load_state_dict(module.state_dict())
            if payload["optimizer"] is not None:
                trainer.optimizers[name].load_state_dict(payload["optimizer"])
        state_path = d / "trainer_state.pt"
        if state_path.exists():
            state = torch.load(state_path, weights_only=False)
            trainer.step, trainer.epoch, trainer.history = state["step"], state["epoch"], state["history"]
            trainer.rng.bit_generator.state = state["rng"]
            torch.set_rng_state(state["torch_rng"])
            trainer.pool_image.items, trainer.pool_mask.items = state["pool_image"], state["pool_mask"]
        return trainer


def _batched(fn, x: torch.Tensor, batch_size=16):
    return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


class PseudoLabelGenerator(BaseEstimator):
    """Learn an image -> mask translator from unpaired images and masks.

    Parameters
    ----------
    net : NetConfig
        Architecture; ``net.image_size`` must match the inputs.
    config : Stage1Config
        Optimisation schedule, loss weights, DGCC turns and VAE pretraining.
    vae : ShapeVAE, optional
        A pretrained shape VAE. Pretrained on the auxiliary masks when omitted.
    random_state : int
    log_path : path, optional
        Per-step metrics CSV.
    checkpoint_dir : path, optional
        Receives network archives (periodically and at the end of ``fit``).

    Attributes
    ----------
    trainer_ : Stage1Trainer
    vae_history_, history_ : list of dict
    """

    def __init__(self, net=None, config=None, vae=None, random_state=0, log_path=None,
                 checkpoint_dir=None, device="cpu"):
        self.net = net
        self.config = config
        self.vae = vae
        self.random_state = random_state
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir
        self.device = device

    def _validate_images(self, X, name="X"):
        X = check_intensity_range(check_image_stack(X, name), name)
        size = (self.net or NetConfig()).image_size
        if X.shape[-1] != size:
            raise ShapeError(f"{name} has resolution {X.shape[-1]}, expected {size}")
        return X

    def fit(self, X, masks, X_val=None, y_val=None):
        """``X``: (N, H, W) images in [-1, 1]; ``masks``: (M, H, W) binary auxiliary masks.

        ``X_val``/``y_val`` (ground truth) only feed a per-epoch validation Dice
        in ``history_``.
        """
        net = self.net or NetConfig()
        cfg = self.config or Stage1Config()
        X = self._validate_images(X)
        masks = check_binary(check_image_stack(masks, "masks"), "masks")
        if masks.shape[-1] != net.image_size:
            raise ShapeError(f"masks have resolution {masks.shape[-1]}, expected {net.image_size}")
        self.vae_history_ = []
        vae = self.vae
        if vae is None:
            vae = pretrain_vae(masks, net, cfg.vae, self.random_state, self.vae_history_, self.device)
        else:
            vae = freeze(copy.deepcopy(vae))
        self.trainer_ = Stage1Trainer(net, cfg, vae, self.random_state, self.device)
        self._train(X, masks, X_val, y_val)
        return self

    def _train(self, X, masks, X_val=None, y_val=None, epochs=None):
        on_epoch_end = None
        if X_val is not None and y_val is not None:
            X_val = self._validate_images(X_val, "X_val")
            y_val = check_binary(check_image_stack(y_val, "y_val"), "y_val")

            def on_epoch_end(trainer, record):
                from .metrics import mean_dice
                record["val_dice"] = mean_dice(self.predict(X_val), y_val)
                log.info("stage1 epoch %d: %s", record["epoch"], record)

        self.trainer_.train(X, masks_to_signed(masks), epochs, MetricsLog(self.log_path), on_epoch_end,
                            self.checkpoint_dir)
        self.history_ = self.trainer_.history
        if self.checkpoint_dir is not None:
            self.trainer_.save(self.checkpoint_dir)

    def resume(self, X, masks, checkpoint_dir, epochs=None):
        """Continue a run from :meth:`Stage1Trainer.save` output."""
        net = self.net or NetConfig()
        cfg = self.config or Stage1Config()
        self.trainer_ = Stage1Trainer.load(checkpoint_dir, net, cfg, self.random_state, self.device)
        self.vae_history_ = []
        self._train(self._validate_images(X), check_binary(check_image_stack(masks, "masks")), epochs=epochs)
        return self

    @classmethod
    def from_checkpoint(cls, directory, net: NetConfig, config: Stage1Config | None = None, device="cpu"):
        est = cls(net=net, config=config, device=device)
        est.trainer_ = Stage1Trainer.load(directory, net, config or Stage1Config(), device=device)
        est.history_ = est.trainer_.history
        est.vae_history_ = []
        return est

    @torch.no_grad()
    def _soft_masks(self, X, turns=None):
        check_is_fitted(self, "trainer_")
        tr = self.trainer_
        for m in tr.networks():
            m.eval()
        x = to_tensor(self._validate_images(X), self.device)
        return _batched(lambda b: tr.translate_to_mask(b, turns), x)

    def decision_function(self, X, turns=None) -> np.ndarray:
        """Signed generator output in [-1, 1], shape (N, H, W)."""
        return self._soft_masks(X, turns)[:, 0].cpu().numpy()

    def predict_proba(self, X, turns=None) -> np.ndarray:
        return signed_to_unit(self.decision_function(X, turns))

    def predict(self, X, turns=None) -> np.ndarray:
        return (self.decision_function(X, turns) > 0).astype(np.uint8)

    @torch.no_grad()
    def _scores(self, soft: torch.Tensor) -> np.ndarray:
        scores = _batched(self.trainer_.D_B, soft)
        return scores.mean(dim=(1, 2, 3)).cpu().numpy().astype(np.float64)

    def score_samples(self, X, turns=None) -> np.ndarray:
        """Mean mask-discriminator patch score of each soft pseudo label (lower = more real)."""
        return self._scores(self._soft_masks(X, turns))

    @torch.no_grad()
    def calibration_trace(self, X, turns=None) -> RecurrentTrace:
        """Per-turn masks and calibration vectors, for diagnostics."""
        check_is_fitted(self, "trainer_")
        tr = self.trainer_
        trace = RecurrentTrace()
        tr.translate_to_mask(to_tensor(self._validate_images(X), self.device), turns, trace)
        return trace

    def generate_pseudo_labels(self, X, ids=None, turns=None) -> list:
        X = self._validate_images(X)
        ids = [f"{i:05d}" for i in range(len(X))] if ids is None else list(ids)
        if len(ids) != len(X):
            raise DataError(f"{len(ids)} ids for {len(X)} images")
        soft = self._soft_masks(X, turns)
        scores = self._scores(soft)
        return [PseudoLabelRecord(i, (s > 0).astype(np.uint8), float(r), 0)
                for i, s, r in zip(ids, soft[:, 0].cpu().numpy(), scores)]
