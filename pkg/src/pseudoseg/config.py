"""Pipeline configuration: nested dataclasses, presets and a strict YAML loader."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import RenderConfig
from .exceptions import ConfigurationError
from .maskgen import Canvas, EllipsePrior
from .nets import NetConfig
from .stage1 import Stage1Config, VAEPretrainConfig
from .stage2 import IterConfig, LQSSConfig

ENV_OUTPUT_ROOT = "PSEUDOSEG_OUTPUT_ROOT"
ENV_DEVICE = "PSEUDOSEG_DEVICE"
PRESETS = ("tiny", "small", "full")


@dataclass
class DataConfig:
    n_images: int = 400
    n_aux_masks: int = 300
    split: tuple = (0.75, 0.05, 0.2)
    resize_to: int = 288  # real-image ingestion only
    crop: int = 256


@dataclass
class MetricsConfig:
    spacing: float = 1.0


@dataclass
class PipelineConfig:
    preset: str = "full"
    seed: int = 0
    device: str = "cpu"
    canvas: Canvas = field(default_factory=lambda: Canvas(256, 0.8))
    prior: EllipsePrior = field(default_factory=EllipsePrior)
    render: RenderConfig = field(default_factory=RenderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    lqss: LQSSConfig = field(default_factory=LQSSConfig)
    stage2: IterConfig = field(default_factory=IterConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.canvas.size != self.net.image_size:
            raise ConfigurationError(
                f"canvas.size={self.canvas.size} must equal net.image_size={self.net.image_size}")

    def seeds(self) -> dict:
        """Independent sub-seeds, all derived from ``seed``."""
        names = ("masks", "aux", "render", "split", "vae", "stage1", "stage2")
        state = np.random.SeedSequence(self.seed).generate_state(len(names))
        return {n: int(s) for n, s in zip(names, state)}

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def preset(name: str) -> PipelineConfig:
    if name == "full":
        return PipelineConfig()
    if name == "small":
        net = NetConfig(image_size=128, base_channels=32, disc_channels=32)
        return PipelineConfig(
            preset="small", canvas=Canvas(128, 1.5), net=net,
            data=DataConfig(n_images=800, n_aux_masks=600, crop=128, resize_to=144),
            stage1=Stage1Config(epochs_flat=10, epochs_decay=10, lr=2e-4, steps_per_epoch=200,
                                vae=VAEPretrainConfig(epochs=100, kl_weight=1e-4)),
            stage2=IterConfig(epochs_per_round=8),
        )
    if name == "tiny":
        net = NetConfig(image_size=64, base_channels=16, disc_channels=16)
        return PipelineConfig(
            preset="tiny", canvas=Canvas(64, 3.0), net=net,
            data=DataConfig(n_images=400, n_aux_masks=300, crop=64, resize_to=72),
            stage1=Stage1Config(epochs_flat=6, epochs_decay=4, lr=2e-4, steps_per_epoch=100,
                                vae=VAEPretrainConfig(epochs=150, kl_weight=1e-4)),
            stage2=IterConfig(max_rounds=3, epochs_per_round=24, batch_size=8, lr=1e-3),
        )
    raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESETS}")


def _check_keys(cls, values, path):
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in values:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigurationError(f"unknown config key {where!r}")


def _merge(base, overrides, path=""):
    """Apply a nested mapping onto a dataclass instance, rejecting unknown keys."""
    if not isinstance(overrides, dict):
        raise ConfigurationError(f"{path or 'config'} must be a mapping")
    _check_keys(type(base), overrides, path)
    changes = {}
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        current = getattr(base, key)
        if dataclasses.is_dataclass(current):
            changes[key] = _merge(current, value, where)
        else:
            changes[key] = tuple(value) if isinstance(value, list) else value
    try:
        return dataclasses.replace(base, **changes)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid value in {path or 'config'}: {exc}") from exc


def from_dict(values: dict | None) -> PipelineConfig:
    values = copy.deepcopy(values or {})
    if not isinstance(values, dict):
        raise ConfigurationError("config must be a mapping")
    name = values.get("preset", "full")
    return _merge(preset(name), values)


def load_config(path=None, preset_name: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Resolve preset, then the YAML file, then ``overrides``, then the environment."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            values = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigurationError(f"config {path} must be a mapping")
    if preset_name is not None:
        values["preset"] = preset_name
    cfg = from_dict(values)
    if overrides:
        cfg = _merge(cfg, overrides)
    device = os.environ.get(ENV_DEVICE)
    if device:
        cfg = dataclasses.replace(cfg, device=device)
    return cfg


def output_path(out) -> Path:
    """Relative output paths are placed under ``$PSEUDOSEG_OUTPUT_ROOT`` when it is set."""
    out = Path(out)
    root = os.environ.get(ENV_OUTPUT_ROOT)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def save_config(cfg: PipelineConfig, directory, name="config.resolved.yaml") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


__all__ = ["DataConfig", "MetricsConfig", "PipelineConfig", "preset", "from_dict", "load_config",
           "save_config", "output_path", "PRESETS"]
