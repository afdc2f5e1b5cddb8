"""Discriminator-guided channel calibration of the mask generator's decoder.

The mask discriminator's penultimate feature map is average-pooled into a
feedback vector, mapped by one squeeze-excitation style pair of bias-free
linear maps per decoder scale to a calibration vector ``beta``, and applied to
the decoder features as ``beta * u + u``. There is deliberately no sigmoid
gate on ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .exceptions import ShapeError


@dataclass
class DGCCSpec:
    feedback_channels: int = 512
    decoder_channels: tuple = (1024, 512, 256, 128)
    reduction: int = 4
    zero_init: bool = True


def extract_feedback(embedding: torch.Tensor) -> torch.Tensor:
    """Global average pool over the two trailing spatial dims."""
    return embedding.mean(dim=(-2, -1))


def calibrate_features(u: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Residual channel-wise calibration ``beta * u + u``.

    ``u`` is (B, C, H, W); ``beta`` is (C,) or (B, C).
    """
    if beta.shape[-1] != u.shape[1]:
        raise ShapeError(f"calibration length {beta.shape[-1]} does not match {u.shape[1]} channels")
    if beta.dim() == 1:
        beta = beta.unsqueeze(0)
    return beta[:, :, None, None] * u + u


class ChannelCalibration(nn.Module):
    """``beta = W2 relu(W1 pooled)`` for a single decoder scale."""

    def __init__(self, in_channels, out_channels, reduction=4, zero_init=True):
        super().__init__()
        hidden = max(out_channels // reduction, 1)
        self.squeeze = nn.Linear(in_channels, hidden, bias=False)
        self.excite = nn.Linear(hidden, out_channels, bias=False)
        if zero_init:
            nn.init.zeros_(self.excite.weight)

    def forward(self, pooled):
        return self.excite(torch.relu(self.squeeze(pooled)))


class DGCC(nn.Module):
    """One :class:`ChannelCalibration` per decoder scale, deepest scale first."""

    def __init__(self, feedback_channels=512, decoder_channels=(1024, 512, 256, 128),
                 reduction=4, zero_init=True):
        super().__init__()
        decoder_channels = tuple(decoder_channels)
        self.spec = DGCCSpec(feedback_channels, decoder_channels, reduction, zero_init)
        self.scales = nn.ModuleList(
            ChannelCalibration(feedback_channels, c, reduction, zero_init) for c in decoder_channels)

    def compute_calibration(self, pooled, scale: int):
        """Calibration vector for one scale, indexed 1..n_scales."""
        if not 1 <= scale <= len(self.scales):
            raise ValueError(f"scale must be in 1..{len(self.scales)}, got {scale}")
        return self.scales[scale - 1](pooled)

    def forward(self, embedding):
        pooled = extract_feedback(embedding)
        return [module(pooled) for module in self.scales]


@dataclass
class RecurrentTrace:
    """Per-turn outputs of :func:`recurrent_generate`, kept for diagnostics."""

    masks: list = field(default_factory=list)
    betas: list = field(default_factory=list)


def recurrent_generate(image, generator, discriminator, dgcc, turns=2, trace: RecurrentTrace | None = None):
    """Run the generate -> discriminate -> calibrate loop and return the last mask.

    Turn 1 is the plain generator; every later turn feeds the discriminator
    embedding of the previous mask back as per-scale calibration vectors.
    """
    if turns < 1:
        raise ValueError(f"turns must be >= 1, got {turns}")
    mask = generator(image)
    if trace is not None:
        trace.masks.append(mask)
    for _ in range(1, turns):
        betas = dgcc(discriminator.embedding(mask))
        mask = generator(image, betas)
        if trace is not None:
            trace.masks.append(mask)
            trace.betas.append(betas)
    return mask
