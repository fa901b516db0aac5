"""Expert interpretability: contribution maps, ablation maps, routing tallies,
and the sparsity census.

Everything here runs deterministically: full image, no masking, router noise
disabled. Maps are per-chip and per-layer over the patch grid; metadata and
class tokens are routed like any other token but excluded from the grids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .config import ModelConfig
from .data import BandStats, Chip
from .model import ChipMAE, patchify, random_mask, PREFIX_TOKENS
from .train import chips_to_tensors


@dataclass
class ExpertMaps:
    """Per-patch expert attributions at one encoder layer.

    ``contribution[r, c, e]`` is the L2 norm of expert e's gated output for
    the patch at grid position (r, c); ``ablation[r, c, e]`` is the L2 change
    in that patch's final encoder embedding when expert e is disabled at the
    layer. Either part may be absent depending on which op produced the maps.
    """

    layer: int
    experts: int
    contribution: np.ndarray | None = None  # (gh, gw, E)
    top1: np.ndarray | None = None          # (gh, gw) argmax expert
    ablation: np.ndarray | None = None      # (gh, gw, E)


@torch.no_grad()
def _chip_inputs(model: ChipMAE, chip: Chip, stats: BandStats | None):
    pixels, meta = chips_to_tensors([chip], stats)
    dtype = next(model.parameters()).dtype
    patches = patchify(pixels.to(dtype), model.config.patch)
    plan = random_mask(1, model.config.num_patches, 0.0)
    return patches, meta.to(dtype), plan


@torch.no_grad()
def contribution_maps(model: ChipMAE, chip: Chip, layer: int, *,
                      stats: BandStats | None = None) -> ExpertMaps:
    """C_{i,e} = || g_{i,e} * f_e(z_i) ||_2 for patch tokens at one layer.

    z is the layer's post-norm FFN input. Non-selected experts contribute
    exactly 0; the top-1 grid is the argmax expert per patch.
    """
    if not 0 <= layer < len(model.encoder):
        raise IndexError(f"layer {layer} out of range")
    model.eval()
    patches, meta, plan = _chip_inputs(model, chip, stats)
    x = model.embed_tokens(patches, meta, plan)
    for blk in model.encoder[:layer]:
        x, _ = blk(x, noise=False)
    blk = model.encoder[layer]
    h = x + blk.attn(blk.ln1(x))
    z = blk.ln2(h).reshape(-1, h.shape[-1])
    route = blk.moe.router(z, noise=False)

    n_experts = blk.moe.experts.num_experts
    values = torch.zeros(z.shape[0], n_experts, dtype=z.dtype)
    for e in range(n_experts):
        sel = (route.gates[:, e] > 0).nonzero(as_tuple=True)[0]
        if sel.numel() == 0:
            continue
        out_e = blk.moe.experts.single(z[sel], e)
        values[sel, e] = route.gates[sel, e] * out_e.norm(dim=-1)

    grid = model.config.grid
    patch_rows = values[PREFIX_TOKENS:, :].reshape(*grid, n_experts)
    contribution = patch_rows.cpu().numpy()
    return ExpertMaps(
        layer=layer, experts=n_experts,
        contribution=contribution,
        top1=contribution.argmax(axis=-1),
    )


@torch.no_grad()
def ablation_maps(model: ChipMAE, chip: Chip, layer: int, *,
                  stats: BandStats | None = None,
                  mode: str = "renormalize") -> ExpertMaps:
    """Delta_{i,e} = || y_i - y_i^(-e) ||_2 on final encoder patch embeddings.

    Disabling zeroes expert e's gate at the target layer and renormalizes
    each affected token's remaining weights (tokens routed solely to e lose
    their FFN update and keep the residual). ``mode="reroute"`` instead
    re-routes those tokens over the remaining experts.
    """
    if not 0 <= layer < len(model.encoder):
        raise IndexError(f"layer {layer} out of range")
    if mode not in ("renormalize", "reroute"):
        raise ValueError(f"unknown ablation mode {mode!r}")
    model.eval()
    patches, meta, plan = _chip_inputs(model, chip, stats)
    baseline, _ = model.encode(patches, meta, plan, noise=False)
    base_patches = baseline[0, PREFIX_TOKENS:, :]

    n_experts = model.encoder[layer].moe.experts.num_experts
    grid = model.config.grid
    delta = np.zeros((*grid, n_experts))
    for e in range(n_experts):
        ablated, _ = model.encode(patches, meta, plan, noise=False,
                                  ablate_layer=layer, ablate_expert=e,
                                  ablate_mode=mode)
        diff = (base_patches - ablated[0, PREFIX_TOKENS:, :]).norm(dim=-1)
        delta[:, :, e] = diff.reshape(grid).cpu().numpy()
    return ExpertMaps(layer=layer, experts=n_experts, ablation=delta)


@dataclass
class RoutingHistogram:
    layer: int
    counts: np.ndarray      # (E,) top-k membership counts
    importance: np.ndarray  # (E,) summed gate mass
    token_count: int

    @property
    def importance_cv(self) -> float:
        mean = self.importance.mean()
        if mean <= 1e-12:
            return 0.0
        return float(self.importance.std() / mean)


@torch.no_grad()
def routing_histogram(model: ChipMAE, chips: list[Chip], layer: int, *,
                      stats: BandStats | None = None,
                      batch_size: int = 64) -> RoutingHistogram:
    """Tally routing over whole chips: how often and how strongly each expert
    at one layer is selected. Noise off, full images; every token counts."""
    if not 0 <= layer < len(model.encoder):
        raise IndexError(f"layer {layer} out of range")
    model.eval()
    n_experts = model.encoder[layer].moe.experts.num_experts
    counts = np.zeros(n_experts, dtype=np.int64)
    importance = np.zeros(n_experts, dtype=np.float64)
    tokens = 0
    dtype = next(model.parameters()).dtype
    for start in range(0, len(chips), batch_size):
        batch = chips[start:start + batch_size]
        pixels, meta = chips_to_tensors(batch, stats)
        pixels, meta = pixels.to(dtype), meta.to(dtype)
        patches = patchify(pixels, model.config.patch)
        plan = random_mask(len(batch), model.config.num_patches, 0.0)
        x = model.embed_tokens(patches, meta, plan)
        for i, blk in enumerate(model.encoder):
            if i == layer:
                h = x + blk.attn(blk.ln1(x))
                z = blk.ln2(h).reshape(-1, h.shape[-1])
                route = blk.moe.router(z, noise=False)
                counts += (route.gates > 0).sum(dim=0).cpu().numpy()
                importance += route.gates.sum(dim=0).double().cpu().numpy()
                tokens += z.shape[0]
            x, _ = blk(x, noise=False)
    return RoutingHistogram(layer=layer, counts=counts,
                            importance=importance, token_count=tokens)


# ---------------------------------------------------------------------------
# Sparsity census (config arithmetic only)
# ---------------------------------------------------------------------------

@dataclass
class SparsityReport:
    layers: list[dict]
    total_unique_ffn: int
    expert_ffn_activated_fraction: float
    overall_activated_fraction: float
    encoder_total: int
    encoder_always_on: int

    def to_json(self) -> str:
        return json.dumps({
            "layers": self.layers,
            "total_unique_ffn": self.total_unique_ffn,
            "expert_ffn_activated_fraction": self.expert_ffn_activated_fraction,
            "overall_activated_fraction": self.overall_activated_fraction,
            "encoder_total": self.encoder_total,
            "encoder_always_on": self.encoder_always_on,
        }, indent=2, sort_keys=True) + "\n"


def sparsity_report(config: ModelConfig) -> SparsityReport:
    """Encoder capacity usage from configuration arithmetic alone.

    Per layer: expert-unique FFN parameters E*h*d and the k/E selection
    ratio. The expert-FFN activated fraction weights each layer's ratio by
    its unique parameter count; the overall fraction counts always-on encoder
    parameters (attention, norms, router, shared projections, embeddings)
    plus the activated expert slice, over the encoder total.
    """
    d = config.embed_dim
    head_dim = d // config.heads
    rows = []
    total_unique = 0
    activated_unique = 0
    always_on = (
        config.patch_values * d + d          # patch embedding
        + 4 * (2 * d + d)                    # metadata projections
        + d                                  # class token
        + (PREFIX_TOKENS + config.num_patches) * d  # positions
        + 2 * d                              # final norm
    )
    for i, spec in enumerate(config.enc_layers):
        unique = spec.experts * spec.hidden * d
        rows.append({
            "layer": i,
            "experts": spec.experts,
            "top_k": spec.top_k,
            "hidden": spec.hidden,
            "unique_ffn": unique,
            "k_over_e": spec.top_k / spec.experts,
        })
        total_unique += unique
        activated_unique += spec.top_k * spec.hidden * d
        always_on += (
            2 * d * d + 2 * config.kv_groups * head_dim * d  # attention
            + 4 * d                                          # two norms
            + 2 * spec.experts * d                           # router
            + 2 * spec.hidden * d                            # shared V, W2
        )
    encoder_total = always_on + total_unique
    return SparsityReport(
        layers=rows,
        total_unique_ffn=total_unique,
        expert_ffn_activated_fraction=activated_unique / total_unique,
        overall_activated_fraction=(always_on + activated_unique) / encoder_total,
        encoder_total=encoder_total,
        encoder_always_on=always_on,
    )


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def maps_to_csv(maps: ExpertMaps, part: str) -> str:
    """Flatten one map part to CSV rows (row, col, expert, value)."""
    if part == "contribution":
        data, column = maps.contribution, "value"
    elif part == "ablation":
        data, column = maps.ablation, "delta"
    else:
        raise ValueError(f"unknown map part {part!r}")
    if data is None:
        raise ValueError(f"maps hold no {part} data")
    lines = [f"row,col,expert,{column}"]
    gh, gw, n_experts = data.shape
    for r in range(gh):
        for c in range(gw):
            for e in range(n_experts):
                lines.append(f"{r},{c},{e},{float(data[r, c, e])!r}")
    return "\n".join(lines) + "\n"


def histogram_to_csv(hist: RoutingHistogram) -> str:
    lines = ["expert,count,importance"]
    for e in range(len(hist.counts)):
        lines.append(f"{e},{int(hist.counts[e])},{float(hist.importance[e])!r}")
    return "\n".join(lines) + "\n"
