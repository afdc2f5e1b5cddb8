"""Annotation-efficient segmentation from unpaired images and shape-prior masks.

Stage 1 learns an image/mask translator (cycle-consistent GAN with a latent
shape discriminator and discriminator-guided channel calibration) and emits
pseudo labels with quality scores. Stage 2 selects the best-scored pseudo
labels and trains a segmenter with a noise-weighted Dice loss over several
self-training rounds.
"""

from .bench import bench_synthetic
from .config import PipelineConfig, load_config, preset
from .exceptions import ConfigurationError, DataError, DivergenceError, PseudoSegError, ShapeError
from .maskgen import Canvas, EllipsePrior, generate_mask_set, load_auxiliary_masks
from .metrics import assd, dice_score, evaluate
from .records import PseudoLabelRecord, read_manifest, write_manifest
from .stage1 import PseudoLabelGenerator, Stage1Config, VAEPretrainConfig, pretrain_vae
from .stage2 import IterConfig, LQSSConfig, NoisyLabelSegmenter, lqss_select

__version__ = "0.1.0"

__all__ = [
    "Canvas", "ConfigurationError", "PipelineConfig", "bench_synthetic", "load_config", "preset", "DataError", "DivergenceError", "EllipsePrior", "IterConfig", "LQSSConfig",
    "NoisyLabelSegmenter", "PseudoLabelGenerator", "PseudoLabelRecord", "PseudoSegError", "ShapeError",
    "Stage1Config", "VAEPretrainConfig", "assd", "dice_score", "evaluate", "generate_mask_set",
    "load_auxiliary_masks", "lqss_select", "pretrain_vae", "read_manifest", "write_manifest",
]
