"""Compact mixture-of-experts masked autoencoder for multispectral chips."""

from .config import LayerSpec, ModelConfig, TrainConfig, default_config
from .data import (BandStats, Chip, ChipArchive, SyntheticSpec,
                   generate_synthetic, load_archive, normalize, write_archive)
from .model import ChipMAE, parameter_census
from .train import load_checkpoint, pretrain, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BandStats", "Chip", "ChipArchive", "ChipMAE", "LayerSpec", "ModelConfig",
    "SyntheticSpec", "TrainConfig", "default_config", "generate_synthetic",
    "load_archive", "load_checkpoint", "normalize", "parameter_census",
    "pretrain", "save_checkpoint", "write_archive",
]
