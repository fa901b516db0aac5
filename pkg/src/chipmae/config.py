"""Model and training configuration.

All architecture hyperparameters live in :class:`ModelConfig`, including the
staged expert schedule (more experts in deeper layers). Named profiles:

- ``default``: 40x40x7 chips, 128-dim encoder, 15 MoE layers staged 3/4/5
  experts, ~2.2M parameters.
- ``smoke``: 16x16x7 chips, 64-dim encoder, 6 layers. Small enough to pretrain
  on a laptop CPU in about a minute; used by the smoke-training checks.
- ``tiny``: 16x16x7 chips, 32-dim encoder, 4 layers. Sub-second unit tests.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


@dataclass(frozen=True)
class LayerSpec:
    """One MoE transformer layer: expert count, top-k, expert hidden width."""

    experts: int
    top_k: int
    hidden: int

    def validate(self) -> None:
        if self.experts < 1:
            raise ValueError(f"experts must be >= 1, got {self.experts}")
        if not 1 <= self.top_k <= self.experts:
            raise ValueError(f"top_k must be in [1, {self.experts}], got {self.top_k}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")


# Encoder schedule for the default profile. Hidden widths are chosen so each
# layer's expert-unique parameter count (experts * embed_dim * hidden) matches
# the published per-layer budget at embed_dim=128; widths shrink with depth
# while expert counts grow 3 -> 4 -> 5.
_DEFAULT_ENC_LAYERS = tuple(
    LayerSpec(e, 2, h)
    for e, h in [
        (3, 163), (3, 156), (3, 151), (3, 145), (3, 139),
        (4, 134), (4, 128), (4, 122), (4, 116), (4, 110),
        (5, 104), (5, 99), (5, 93), (5, 87), (5, 82),
    ]
)


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the MoE masked autoencoder."""

    height: int = 40
    width: int = 40
    bands: int = 7
    patch: int = 4
    embed_dim: int = 128
    enc_layers: tuple[LayerSpec, ...] = _DEFAULT_ENC_LAYERS
    heads: int = 4
    kv_groups: int = 2
    dec_dim: int = 64
    # Decoder keeps two small MoE blocks, three experts each, hidden dec_dim/2.
    dec_layers: tuple[LayerSpec, ...] = (LayerSpec(3, 2, 32), LayerSpec(3, 2, 32))
    dec_heads: int = 4
    dec_kv_groups: int = 2
    mask_ratio: float = 0.75
    alpha: float = 0.1   # weight on the visible-patch reconstruction term
    beta: float = 0.5    # weight on the accumulated MoE balancing loss
    lambda_importance: float = 1.0
    lambda_load: float = 1.0
    squared_cv: bool = True  # squared CV penalty (differentiable at uniformity)
    noise_enabled: bool = True

    def __post_init__(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"chip {self.height}x{self.width} not divisible by patch {self.patch}"
            )
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.heads % self.kv_groups:
            raise ValueError("heads must be divisible by kv_groups")
        if self.dec_dim % self.dec_heads:
            raise ValueError("dec_dim must be divisible by dec_heads")
        if self.dec_heads % self.dec_kv_groups:
            raise ValueError("dec_heads must be divisible by dec_kv_groups")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")
        for spec in tuple(self.enc_layers) + tuple(self.dec_layers):
            spec.validate()

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_values(self) -> int:
        return self.patch * self.patch * self.bands

    @property
    def seq_len(self) -> int:
        """Full token count: 4 metadata + 1 cls + all patches."""
        return 5 + self.num_patches

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["enc_layers"] = [list(dataclasses.astuple(s)) for s in self.enc_layers]
        d["dec_layers"] = [list(dataclasses.astuple(s)) for s in self.dec_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["enc_layers"] = tuple(LayerSpec(*s) for s in d["enc_layers"])
        d["dec_layers"] = tuple(LayerSpec(*s) for s in d["dec_layers"])
        return cls(**d)


def default_config() -> ModelConfig:
    return ModelConfig()


def smoke_config() -> ModelConfig:
    """Scaled-down profile for desk-scale pretraining runs."""
    return ModelConfig(
        height=16,
        width=16,
        patch=4,
        embed_dim=64,
        enc_layers=tuple(
            LayerSpec(e, 2, h)
            for e, h in [(3, 80), (3, 76), (4, 72), (4, 68), (5, 64), (5, 60)]
        ),
        dec_dim=32,
        dec_layers=(LayerSpec(3, 2, 16), LayerSpec(3, 2, 16)),
    )


def tiny_config() -> ModelConfig:
    """Smallest profile that still exercises the staged expert schedule."""
    return ModelConfig(
        height=16,
        width=16,
        patch=4,
        embed_dim=32,
        enc_layers=(
            LayerSpec(3, 2, 40),
            LayerSpec(3, 2, 36),
            LayerSpec(4, 2, 32),
            LayerSpec(5, 2, 28),
        ),
        dec_dim=16,
        dec_layers=(LayerSpec(3, 2, 8), LayerSpec(3, 2, 8)),
    )


PROFILES = {
    "default": default_config,
    "smoke": smoke_config,
    "tiny": tiny_config,
}


@dataclass
class TrainConfig:
    """Pretraining hyperparameters (defaults mirror the published recipe)."""

    epochs: int = 500
    batch_size: int = 128
    base_lr: float = 3e-4
    min_lr: float = 0.0
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # Norm, token, and positional parameters are excluded from weight decay
    # unless this flag is set.
    decay_all_params: bool = False
    float64: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        return cls(**d)
