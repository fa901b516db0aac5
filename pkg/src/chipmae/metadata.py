"""Cyclic geo-temporal metadata encoding and its projection to token space.

Each metadata value with period P maps to the unit-circle point
(sin(2*pi*v/P), cos(2*pi*v/P)), so week 0 equals week 52 and longitude
wraps at the antimeridian. Absent metadata encodes as the neutral point
(0, 1), which is the same as value 0; the model learns to treat angle 0
as "unknown or start of cycle".
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .data import Chip

# Periods: calendar week of year, hour of day, degrees. Latitude spans only
# [-90, 90] but is encoded with the full 360-degree period so that the pair
# (sin, cos) stays injective on its physical range.
PERIODS = {"week": 52.0, "hour": 24.0, "lat": 360.0, "lon": 360.0}

# Token order inside the metadata prefix.
FIELDS = ("week", "hour", "lat", "lon")

NEUTRAL = (0.0, 1.0)


def cyclic_encode(value: float, period: float) -> tuple[float, float]:
    """Map a value with the given period to (sin, cos) of its phase angle."""
    theta = 2.0 * math.pi * value / period
    return math.sin(theta), math.cos(theta)


def encode_metadata(chip: Chip) -> np.ndarray:
    """(4, 2) float32 array of (sin, cos) rows in week/hour/lat/lon order."""
    if not chip.metadata_present:
        return np.tile(np.array(NEUTRAL, dtype=np.float32), (len(FIELDS), 1))
    values = {"week": chip.week, "hour": chip.hour, "lat": chip.lat, "lon": chip.lon}
    rows = [cyclic_encode(values[f], PERIODS[f]) for f in FIELDS]
    return np.asarray(rows, dtype=np.float32)


def encode_metadata_batch(chips: Iterable[Chip]) -> np.ndarray:
    """(B, 4, 2) stacked encodings."""
    encoded = [encode_metadata(c) for c in chips]
    if not encoded:
        return np.zeros((0, len(FIELDS), 2), dtype=np.float32)
    return np.stack(encoded)


class MetadataProjector(nn.Module):
    """Four independent linear maps from (sin, cos) pairs to embedding space.

    Each field gets its own weights so that e.g. the hour projection can learn
    a diurnal axis unrelated to the seasonal one.
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        self.projections = nn.ModuleList(
            [nn.Linear(2, embed_dim) for _ in FIELDS]
        )

    def forward(self, encoded: torch.Tensor) -> torch.Tensor:
        """(B, 4, 2) -> (B, 4, d): one token per metadata field."""
        if encoded.shape[-2:] != (len(FIELDS), 2):
            raise ValueError(f"expected (..., {len(FIELDS)}, 2), got {tuple(encoded.shape)}")
        tokens = [proj(encoded[:, i, :]) for i, proj in enumerate(self.projections)]
        return torch.stack(tokens, dim=1)
