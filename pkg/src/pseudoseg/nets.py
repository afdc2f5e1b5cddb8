"""Network definitions: U-Net generators, PatchGAN discriminators, the shape VAE
and the latent-code discriminator, plus versioned checkpoint helpers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .dgcc import DGCC, calibrate_features
from .exceptions import ShapeError

CHECKPOINT_FORMAT = "pseudoseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    """Architecture hyperparameters shared by every network of the pipeline."""

    image_size: int = 256
    base_channels: int = 64
    downsample_levels: int = 4
    residual_blocks: int = 6
    disc_channels: int = 64
    disc_layers: int = 3
    latent_length: int = 32
    vae_channels: int = 16
    vae_max_channels: int = 128
    latent_disc_hidden: int = 64
    dgcc_reduction: int = 4


@dataclass
class GeneratorSpec:
    base_channels: int = 64
    downsample_levels: int = 4
    residual_blocks: int = 6
    output_activation: str = "tanh"
    in_channels: int = 1
    out_channels: int = 1


@dataclass
class PatchDiscSpec:
    base_channels: int = 64
    n_layers: int = 3
    in_channels: int = 1


@dataclass
class VAESpec:
    resolution: int = 256
    latent_length: int = 32
    base_channels: int = 16
    max_channels: int = 128


@dataclass
class LatentDiscSpec:
    latent_length: int = 32
    hidden: int = 64
    negative_slope: float = 0.2


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    """conv-norm-ReLU-conv-norm with an additive skip."""

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class _UpLevel(nn.Module):
    def __init__(self, channels):
        super().__init__()
        half = channels // 2
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(channels, half, 3, padding=1),
            nn.InstanceNorm2d(half),
            nn.ReLU(inplace=True),
        )
        self.fuse = _conv_block(channels, half)


class UNetGenerator(nn.Module):
    """U-Net variant with a residual bottleneck and concatenation skips.

    ``decoder_channels`` lists the channel count of the concatenated feature map
    at each decoder scale, deepest first; those are the maps a channel
    calibration acts on. With 64 base channels and 4 levels it is
    ``(1024, 512, 256, 128)``.
    """

    def __init__(self, base_channels=64, downsample_levels=4, residual_blocks=6,
                 output_activation="tanh", in_channels=1, out_channels=1):
        super().__init__()
        if output_activation not in ("tanh", "sigmoid"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.spec = GeneratorSpec(base_channels, downsample_levels, residual_blocks,
                                  output_activation, in_channels, out_channels)
        b = base_channels
        self.stem = nn.Sequential(_conv_block(in_channels, b), _conv_block(b, b))
        self.down = nn.ModuleList()
        c = b
        for _ in range(downsample_levels):
            self.down.append(nn.Sequential(_conv_block(c, 2 * c, stride=2), _conv_block(2 * c, 2 * c)))
            c *= 2
        self.bottleneck = nn.Sequential(*[ResidualBlock(c) for _ in range(residual_blocks)])
        self.up = nn.ModuleList()
        channels = []
        for _ in range(downsample_levels):
            self.up.append(_UpLevel(c))
            channels.append(c)
            c //= 2
        self.decoder_channels = tuple(channels)
        self.head = nn.Conv2d(b, out_channels, 1)
        self.activation = nn.Tanh() if output_activation == "tanh" else nn.Sigmoid()

    @property
    def min_resolution(self):
        return 2 ** (self.spec.downsample_levels + 1)

    def _check_calibration(self, calibration, batch):
        if len(calibration) != len(self.decoder_channels):
            raise ShapeError(
                f"expected {len(self.decoder_channels)} calibration vectors, got {len(calibration)}")
        for s, (beta, c) in enumerate(zip(calibration, self.decoder_channels)):
            if beta.shape[-1] != c or beta.dim() not in (1, 2) or (beta.dim() == 2 and beta.shape[0] not in (1, batch)):
                raise ShapeError(f"calibration vector at scale {s} has shape {tuple(beta.shape)}; "
                                 f"expected ({c},) or (batch, {c})")

    def forward(self, x, calibration: Sequence[torch.Tensor] | None = None):
        size = x.shape[-1]
        if x.shape[-2] != size or size % (2 ** self.spec.downsample_levels) or size < self.min_resolution:
            raise ShapeError(f"input of spatial shape {tuple(x.shape[-2:])} is incompatible with "
                             f"{self.spec.downsample_levels} downsampling levels")
        if calibration is not None:
            self._check_calibration(calibration, x.shape[0])
        skips = [self.stem(x)]
        h = skips[0]
        for level in self.down:
            h = level(h)
            skips.append(h)
        h = self.bottleneck(skips.pop())
        for s, level in enumerate(self.up):
            h = torch.cat([level.up(h), skips.pop()], dim=1)
            if calibration is not None:
                h = calibrate_features(h, calibration[s])
            h = level.fuse(h)
        return self.activation(self.head(h))


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator (70x70 receptive field at the default 3 layers).

    ``embedding`` returns the feature map right before the 1-channel output
    convolution.
    """

    kernel_size = 4

    def __init__(self, base_channels=64, n_layers=3, in_channels=1):
        super().__init__()
        self.spec = PatchDiscSpec(base_channels, n_layers, in_channels)
        k, p = self.kernel_size, 1
        layers = [nn.Conv2d(in_channels, base_channels, k, 2, p), nn.LeakyReLU(0.2, inplace=True)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [nn.Conv2d(base_channels * prev, base_channels * mult, k, 2, p),
                       nn.InstanceNorm2d(base_channels * mult), nn.LeakyReLU(0.2, inplace=True)]
        prev, mult = mult, min(2 ** n_layers, 8)
        layers += [nn.Conv2d(base_channels * prev, base_channels * mult, k, 1, p),
                   nn.InstanceNorm2d(base_channels * mult), nn.LeakyReLU(0.2, inplace=True)]
        self.features = nn.Sequential(*layers)
        self.output = nn.Conv2d(base_channels * mult, 1, k, 1, p)
        self.embedding_channels = base_channels * mult

    def conv_layers(self):
        return [m for m in list(self.features) + [self.output] if isinstance(m, nn.Conv2d)]

    def grid_size(self, input_size: int) -> int:
        """Side length N of the N x N score matrix for a square input."""
        n = input_size
        for conv in self.conv_layers():
            n = (n + 2 * conv.padding[0] - conv.kernel_size[0]) // conv.stride[0] + 1
        return n

    def receptive_field(self) -> int:
        rf = 1
        for conv in reversed(self.conv_layers()):
            rf = (rf - 1) * conv.stride[0] + conv.kernel_size[0]
        return rf

    def embedding(self, x):
        return self.features(x)

    def forward(self, x, return_embedding=False):
        h = self.features(x)
        out = self.output(h)
        return (out, h) if return_embedding else out


class ShapeVAE(nn.Module):
    """Convolutional VAE over signed masks in [-1, 1]."""

    def __init__(self, resolution=256, latent_length=32, base_channels=16, max_channels=128):
        super().__init__()
        self.spec = VAESpec(resolution, latent_length, base_channels, max_channels)
        levels = int(round(math.log2(resolution / 4)))
        if 4 * 2 ** levels != resolution:
            raise ShapeError(f"VAE resolution must be 4 * 2**k, got {resolution}")
        chans = [min(base_channels * 2 ** i, max_channels) for i in range(levels)]
        enc, cin = [], 1
        for c in chans:
            enc += [nn.Conv2d(cin, c, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            cin = c
        self.encoder = nn.Sequential(*enc, nn.Flatten())
        self._top = cin
        flat = cin * 16
        self.to_mean = nn.Linear(flat, latent_length)
        self.to_logvar = nn.Linear(flat, latent_length)
        self.from_latent = nn.Linear(latent_length, flat)
        dec = []
        for c in reversed([1] + chans[:-1]):
            dec += [nn.LeakyReLU(0.2, inplace=True), nn.ConvTranspose2d(cin, c, 4, 2, 1)]
            cin = c
        self.decoder = nn.Sequential(*dec, nn.Tanh())

    @property
    def latent_length(self):
        return self.spec.latent_length

    def encode(self, mask, eps=None):
        """Return ``(mean, logvar, sample)``; ``eps`` overrides the N(0, I) draw."""
        h = self.encoder(mask)
        mean, logvar = self.to_mean(h), self.to_logvar(h)
        if eps is None:
            eps = torch.randn_like(mean)
        return mean, logvar, reparameterize(mean, logvar, eps)

    def decode(self, z):
        if not torch.all(torch.isfinite(z)):
            raise FloatingPointError("non-finite latent vector")
        h = self.from_latent(z).view(z.shape[0], self._top, 4, 4)
        return self.decoder(h)

    def forward(self, mask):
        mean, logvar, z = self.encode(mask)
        return self.decode(z), mean, logvar


def reparameterize(mean, logvar, eps):
    return mean + torch.exp(0.5 * logvar) * eps


class LatentDiscriminator(nn.Module):
    """Three linear layers with leaky ReLU, scoring a latent code."""

    def __init__(self, latent_length=32, hidden=64, negative_slope=0.2):
        super().__init__()
        self.spec = LatentDiscSpec(latent_length, hidden, negative_slope)
        self.net = nn.Sequential(
            nn.Linear(latent_length, hidden),
            nn.LeakyReLU(negative_slope),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(negative_slope),
            nn.Linear(hidden, 1),
        )

    def forward(self, z):
        return self.net(z).squeeze(-1)


def build_generator(net: NetConfig, output_activation="tanh") -> UNetGenerator:
    return UNetGenerator(net.base_channels, net.downsample_levels, net.residual_blocks, output_activation)


def build_patch_discriminator(net: NetConfig) -> PatchDiscriminator:
    return PatchDiscriminator(net.disc_channels, net.disc_layers)


def build_vae(net: NetConfig) -> ShapeVAE:
    return ShapeVAE(net.image_size, net.latent_length, net.vae_channels, net.vae_max_channels)


def build_latent_discriminator(net: NetConfig) -> LatentDiscriminator:
    return LatentDiscriminator(net.latent_length, net.latent_disc_hidden)


_REGISTRY = {
    "generator": UNetGenerator,
    "patch_discriminator": PatchDiscriminator,
    "vae": ShapeVAE,
    "latent_discriminator": LatentDiscriminator,
    "dgcc": DGCC,
}


def register_module_kind(kind, cls):
    _REGISTRY[kind] = cls


def module_kind(module: nn.Module) -> str:
    for kind, cls in _REGISTRY.items():
        if type(module) is cls:
            return kind
    raise KeyError(f"no checkpoint kind registered for {type(module).__name__}")


def save_checkpoint(path, module: nn.Module, optimizer=None, epoch=None, extra=None):
    """Write one network to a self-describing archive."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": module_kind(module),
        "spec": asdict(module.spec),
        "state_dict": module.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu"):
    """Rebuild a network from :func:`save_checkpoint` output.

    Returns ``(module, payload)``; the optimizer state stays in ``payload``.
    """
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path} has checkpoint version {payload['version']}, "
                         f"newer than supported {CHECKPOINT_VERSION}")
    module = _REGISTRY[payload["kind"]](**payload["spec"])
    module.load_state_dict(payload["state_dict"])
    return module, payload
