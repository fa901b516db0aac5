"""Shared fixtures. The expensive one is a 30-epoch smoke pretraining run used
by the end-to-end checks; it runs once per session and records its wall time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import pytest
import torch

from chipmae.config import TrainConfig, smoke_config
from chipmae.data import BandStats, Chip, compute_band_stats, generate_synthetic, SyntheticSpec
from chipmae.model import ChipMAE
from chipmae.train import MetricsLog, pretrain

torch.set_num_threads(8)


@dataclass
class SmokeRun:
    model: ChipMAE
    chips: list[Chip]
    stats: BandStats
    log: MetricsLog
    elapsed: float
    train_config: TrainConfig


@pytest.fixture(scope="session")
def smoke_run() -> SmokeRun:
    """512 two-class synthetic chips pretrained for 30 epochs on the smoke
    profile. Shared by the training-dynamics and probe checks."""
    chips = generate_synthetic(SyntheticSpec(
        count=512, height=16, width=16, bands=7,
        label_mode="single", class_count=2, seed=11))
    stats = compute_band_stats(chips)
    model = ChipMAE(smoke_config())
    cfg = TrainConfig(epochs=30, batch_size=128, seed=4)
    start = time.perf_counter()
    _, log = pretrain(model, chips, cfg, stats=stats)
    elapsed = time.perf_counter() - start
    return SmokeRun(model=model, chips=chips, stats=stats, log=log,
                    elapsed=elapsed, train_config=cfg)
