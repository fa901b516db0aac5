"""Pretraining driver: schedule, optimizer, epoch loop, checkpoints, metrics.

The optimizer is a hand-rolled decoupled-weight-decay Adam so its state can
round-trip through the same tensor container as the model weights. Everything
is driven by explicit torch generators; two runs with the same seed produce
bitwise-identical metrics and checkpoints on one machine.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .data import BandStats, Chip, normalize
from .metadata import encode_metadata_batch
from .model import ChipMAE, LossBreakdown
from .moe import coefficient_of_variation

CHECKPOINT_MAGIC = b"GMOE"
CHECKPOINT_VERSION = 1

METRICS_HEADER = "epoch,l_masked,l_unmasked,l_moe,l_total,lr"


class NonFiniteLossError(RuntimeError):
    """A loss component left the finite range during training."""

    def __init__(self, component: str, epoch: int, batch: int, value: float):
        self.component = component
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"non-finite {component} ({value}) at epoch {epoch}, batch {batch}")


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

def warmup_steps(total_steps: int, warmup_frac: float) -> int:
    return int(math.floor(total_steps * warmup_frac + 0.5))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Per-step warmup-cosine schedule.

    Linear 0 -> base_lr over the warmup span, then cosine from base_lr to
    min_lr over the remaining steps. Both branches meet at base_lr.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg.warmup_frac)
    if step < w:
        return cfg.base_lr * step / w
    if total_steps == w:
        return cfg.base_lr
    progress = (step - w) / (total_steps - w)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (
        1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor]) -> "AdamWState":
        return cls(
            step=0,
            exp_avg={n: torch.zeros_like(p) for n, p in params.items()},
            exp_avg_sq={n: torch.zeros_like(p) for n, p in params.items()},
        )


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor],
               grads: dict[str, torch.Tensor | None],
               state: AdamWState, lr: float, cfg: TrainConfig,
               decay_names: set[str]) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies the parameter by (1 - lr*wd) before the moment update;
    names outside ``decay_names`` are never decayed. Missing gradients are
    treated as zero (the moments still decay toward zero).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if p.shape != state.exp_avg[name].shape:
            raise ValueError(f"moment shape mismatch for {name}")
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if cfg.weight_decay and name in decay_names:
            p.mul_(1.0 - lr * cfg.weight_decay)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if g is None:
            g = torch.zeros_like(p)
        m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m / bc1, denom, value=-lr)


def decay_parameter_names(model: ChipMAE, decay_all: bool) -> set[str]:
    """Weight-decay set: everything except norms, positions, and token params.

    Layer-norm affine parameters, positional embeddings, the class and mask
    tokens, the metadata projections, and all biases keep their scale.
    """
    names = {n for n, _ in model.named_parameters()}
    if decay_all:
        return names
    skip_prefixes = ("enc_pos", "dec_pos", "cls_token", "mask_token", "meta_proj")
    out = set()
    for n in names:
        if n.startswith(skip_prefixes):
            continue
        if ".ln1." in n or ".ln2." in n or n.startswith(("enc_norm", "dec_norm")):
            continue
        if n.endswith(".bias"):
            continue
        out.add(n)
    return out


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    l_masked: float
    l_unmasked: float
    l_moe: float
    l_total: float
    lr: float


@dataclass
class MetricsLog:
    rows: list[EpochMetrics] = field(default_factory=list)
    # Side-channel diagnostics kept out of the CSV contract.
    importance_cv: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [METRICS_HEADER]
        for r in self.rows:
            lines.append(f"{r.epoch},{r.l_masked!r},{r.l_unmasked!r},"
                         f"{r.l_moe!r},{r.l_total!r},{r.lr!r}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(self.to_csv())
        os.replace(tmp, path)


def read_metrics_csv(path: str | os.PathLike) -> MetricsLog:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln]
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"unexpected metrics header in {path}")
    log = MetricsLog()
    for ln in lines[1:]:
        epoch, *vals = ln.split(",")
        log.rows.append(EpochMetrics(int(epoch), *map(float, vals)))
    return log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    train_record: dict
    band_stats: BandStats | None = None

    def build_model(self) -> ChipMAE:
        model = ChipMAE(self.model_config)
        state = {}
        for name, param in model.state_dict().items():
            if name not in self.tensors:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            arr = self.tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"tensor {name} shape {arr.shape} != model {tuple(param.shape)}")
            state[name] = torch.from_numpy(arr.copy())
        model.load_state_dict(state)
        return model


def _write_tensor(f: io.BufferedWriter, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", arr32.ndim))
    f.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
    f.write(arr32.tobytes())


def save_checkpoint(path: str | os.PathLike, model: ChipMAE, *,
                    train_record: dict | None = None,
                    band_stats: BandStats | None = None,
                    optimizer: AdamWState | None = None) -> None:
    """Write model weights (and optionally optimizer moments) to one file."""
    tensors: dict[str, np.ndarray] = {
        name: value.detach().cpu().numpy()
        for name, value in model.state_dict().items()
    }
    if optimizer is not None:
        for n, t in optimizer.exp_avg.items():
            tensors[f"opt.m.{n}"] = t.detach().cpu().numpy()
        for n, t in optimizer.exp_avg_sq.items():
            tensors[f"opt.v.{n}"] = t.detach().cpu().numpy()
    record = dict(train_record or {})
    if optimizer is not None:
        record["optimizer_step"] = optimizer.step
    header = {
        "model": model.config.to_dict(),
        "train_record": record,
        "tensor_count": len(tensors),
    }
    if band_stats is not None:
        header["band_stats"] = {
            "mean": [float(v) for v in band_stats.mean],
            "std": [float(v) for v in band_stats.std],
        }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name])
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(blob[12:12 + hlen])
    tensors: dict[str, np.ndarray] = {}
    off = 12 + hlen
    for _ in range(header["tensor_count"]):
        if off + 2 > len(blob):
            raise CheckpointError("truncated tensor record")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        if off + 1 > len(blob):
            raise CheckpointError(f"truncated tensor record {name}")
        rank = blob[off]
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        end = off + 4 * count
        if end > len(blob):
            raise CheckpointError(f"truncated tensor data for {name}")
        tensors[name] = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).copy()
        off = end
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after tensors")
    stats = None
    if "band_stats" in header:
        stats = BandStats(np.array(header["band_stats"]["mean"]),
                          np.array(header["band_stats"]["std"]))
    return Checkpoint(
        version=version,
        model_config=ModelConfig.from_dict(header["model"]),
        tensors=tensors,
        train_record=header.get("train_record", {}),
        band_stats=stats,
    )


# ---------------------------------------------------------------------------
# Data marshalling
# ---------------------------------------------------------------------------

def chips_to_tensors(chips: list[Chip],
                     stats: BandStats | None = None,
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized pixels (B, H, W, C) and cyclic metadata (B, 4, 2)."""
    if stats is not None:
        chips = [normalize(c, stats) for c in chips]
    pixels = torch.from_numpy(np.stack([c.pixels for c in chips]))
    meta = torch.from_numpy(encode_metadata_batch(chips))
    return pixels, meta


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def pretrain(model: ChipMAE, chips: list[Chip], cfg: TrainConfig, *,
             stats: BandStats | None = None,
             init: bool = True) -> tuple[AdamWState, MetricsLog]:
    """Masked-reconstruction pretraining over in-memory chips.

    Shuffling, masking, and router noise all come from one generator seeded
    with cfg.seed; the model's initial weights come from the same seed when
    ``init`` is set. Drop-last batching keeps every step's shapes fixed.
    Raises NonFiniteLossError naming the first bad component.
    """
    if not chips:
        raise ValueError("pretrain needs at least one chip")
    if cfg.float64:
        model.double()
    generator = torch.Generator().manual_seed(cfg.seed)
    if init:
        model.init_parameters(generator)

    pixels, meta = chips_to_tensors(chips, stats)
    if cfg.float64:
        pixels, meta = pixels.double(), meta.double()

    params = dict(model.named_parameters())
    opt = AdamWState.for_params(params)
    decay_names = decay_parameter_names(model, cfg.decay_all_params)
    log = MetricsLog()

    batches_per_epoch = len(chips) // cfg.batch_size
    if batches_per_epoch == 0:
        raise ValueError(
            f"batch size {cfg.batch_size} exceeds corpus size {len(chips)}")
    total_steps = cfg.epochs * batches_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(chips), generator=generator)
        sums = {"l_masked": 0.0, "l_unmasked": 0.0, "l_moe": 0.0,
                "l_total": 0.0, "lr": 0.0}
        cv_sum, cv_n = 0.0, 0
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            step += 1
            lr = lr_at(step, total_steps, cfg)
            _, _, breakdown, enc_stats = model(pixels[idx], meta[idx],
                                               generator=generator)
            _check_finite(breakdown, epoch, b)
            model.zero_grad(set_to_none=True)
            breakdown.l_total.backward()
            grads = {n: p.grad for n, p in params.items()}
            adamw_step(params, grads, opt, lr, cfg, decay_names)

            parts = breakdown.to_floats()
            for k in ("l_masked", "l_unmasked", "l_moe", "l_total"):
                sums[k] += parts[k]
            sums["lr"] += lr
            with torch.no_grad():
                cvs = [float(coefficient_of_variation(st.importance,
                                                      squared=False))
                       for st in enc_stats]
            cv_sum += sum(cvs) / len(cvs)
            cv_n += 1
        log.rows.append(EpochMetrics(
            epoch=epoch,
            l_masked=sums["l_masked"] / batches_per_epoch,
            l_unmasked=sums["l_unmasked"] / batches_per_epoch,
            l_moe=sums["l_moe"] / batches_per_epoch,
            l_total=sums["l_total"] / batches_per_epoch,
            lr=sums["lr"] / batches_per_epoch,
        ))
        log.importance_cv.append(cv_sum / max(cv_n, 1))
    return opt, log


def _check_finite(breakdown: LossBreakdown, epoch: int, batch: int) -> None:
    for name in ("l_masked", "l_unmasked", "l_moe", "l_total"):
        value = float(getattr(breakdown, name).detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(name, epoch, batch, value)
