"""Training objectives.

Adversarial losses use the label convention real = 0, fake = 1 by default:
the discriminator pushes fake scores to 1 and real scores to 0, and the
generator pushes its fakes toward 0. Under this convention a *lower* mean
patch score means a more realistic input, which is what sample selection
relies on. Pass ``convention="standard"`` for the usual real = 1, fake = 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .exceptions import ShapeError

EPSILON = 1e-5

CONVENTIONS = {"paper": (0.0, 1.0), "standard": (1.0, 0.0)}


@dataclass
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_adv: float = 1.0
    lambda_vae: float = 1.0
    epsilon: float = EPSILON

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_adv", "lambda_vae", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _labels(convention):
    try:
        return CONVENTIONS[convention]
    except KeyError:
        raise ValueError(f"unknown label convention {convention!r}") from None


def cycle_loss(original, reconstructed):
    """Mean absolute difference over all pixels and the batch."""
    if original.shape != reconstructed.shape:
        raise ShapeError(f"shape mismatch {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return (original - reconstructed).abs().mean()


def lsgan_d_loss(d_real, d_fake, convention="paper"):
    real, fake = _labels(convention)
    return ((d_fake - fake) ** 2).mean() + ((d_real - real) ** 2).mean()


def lsgan_g_loss(d_fake, convention="paper"):
    real, _ = _labels(convention)
    return ((d_fake - real) ** 2).mean()


def vae_adv_loss_d(z_fake_scores, z_real_scores, convention="paper"):
    """Latent discriminator objective; same form as :func:`lsgan_d_loss`."""
    return lsgan_d_loss(z_real_scores, z_fake_scores, convention)


def vae_adv_loss_g(z_fake_scores, convention="paper"):
    return lsgan_g_loss(z_fake_scores, convention)


def kl_standard_normal(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch."""
    kl = 0.5 * (torch.exp(logvar) + mean ** 2 - 1.0 - logvar).sum(dim=-1)
    return kl.mean()


def vae_pretrain_loss(mask, reconstruction, mean, logvar, kl_weight=1.0):
    return ((reconstruction - mask) ** 2).mean() + kl_weight * kl_standard_normal(mean, logvar)


def _soft_dice(p, g, w=None, eps=EPSILON):
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
    if w is None:
        inter, total = (p * g).sum(), (p + g).sum()
    else:
        inter, total = (w * p * g).sum(), (w * (p + g)).sum()
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def dice_loss(pred, target, eps=EPSILON):
    """``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)`` over every element."""
    return _soft_dice(pred, target, None, eps)


def noise_weights(pred, pseudo_label):
    """Per-pixel weights ``1 - |p - g|``, detached from the graph."""
    return (1.0 - (pred - pseudo_label).abs()).detach()


def noise_weighted_dice_loss(pred, pseudo_label, eps=EPSILON, weights=None, warn_below=0.05):
    """Dice loss with each pixel weighted by ``1 - |p - g|``.

    The weights are recomputed from the current prediction but treated as
    constants for backpropagation. ``weights`` overrides them (for instance
    with ones, which recovers :func:`dice_loss` exactly).
    """
    w = noise_weights(pred, pseudo_label) if weights is None else weights
    if warn_below is not None and float(w.mean()) < warn_below:
        warnings.warn(f"mean noise weight {float(w.mean()):.3g} < {warn_below}; the loss carries "
                      "almost no gradient for this batch", RuntimeWarning, stacklevel=2)
    return _soft_dice(pred, pseudo_label, w, eps)
