"""Masked-autoencoder assembly over the MoE transformer blocks.

Pipeline: patchify -> mask -> embed visible patches with metadata and class
tokens -> staged MoE encoder -> project to the decoder width, refill masked
slots with a learned token -> two-block MoE decoder -> per-patch pixel head.
Reconstruction is supervised on masked patches, lightly on visible ones, and
the encoder's per-layer balancing penalties join the objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .metadata import MetadataProjector, FIELDS
from .moe import MoEBlock, MoEStats, _init_weight

PREFIX_TOKENS = len(FIELDS) + 1  # four metadata tokens plus one class token


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W, C) or (H, W, C) -> (B, N, p*p*C) rows in row-major patch order.

    Each row flattens one p x p patch in (row, col, band) order.
    """
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"{h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)
    return x.squeeze(0) if single else x


def unpatchify(patches: torch.Tensor, patch: int, height: int,
               width: int) -> torch.Tensor:
    """Exact inverse of :func:`patchify` for the same geometry."""
    single = patches.dim() == 2
    if single:
        patches = patches.unsqueeze(0)
    b, n, d = patches.shape
    gh, gw = height // patch, width // patch
    if n != gh * gw or d % (patch * patch):
        raise ValueError(f"patch grid mismatch: n={n}, d={d}")
    c = d // (patch * patch)
    x = patches.reshape(b, gh, gw, patch, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, height, width, c)
    return x.squeeze(0) if single else x


@dataclass
class MaskPlan:
    """Per-sample split of patch slots into visible and masked sets.

    ``restore`` inverts the (visible ++ masked) shuffle back to original
    patch order. With zero masked patches the plan is the identity, so a
    full-image pass visits patches in their natural order.
    """

    visible: torch.Tensor  # (B, N - m) original patch indices
    masked: torch.Tensor   # (B, m)
    restore: torch.Tensor  # (B, N)

    @property
    def batch(self) -> int:
        return self.visible.shape[0]

    @property
    def num_patches(self) -> int:
        return self.restore.shape[1]

    @property
    def num_masked(self) -> int:
        return self.masked.shape[1]


def masked_count(num_patches: int, ratio: float) -> int:
    """Masked patches for a ratio: round-half-up of N*r."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1)")
    return int(math.floor(num_patches * ratio + 0.5))


def random_mask(batch: int, num_patches: int, ratio: float,
                generator: torch.Generator | None = None,
                device: torch.device | None = None) -> MaskPlan:
    """Uniform random mask plan; deterministic for a fixed generator state."""
    m = masked_count(num_patches, ratio)
    if m == 0:
        order = torch.arange(num_patches, device=device).expand(batch, -1)
    else:
        scores = torch.empty(batch, num_patches, device=device)
        scores.uniform_(generator=generator)
        order = torch.argsort(scores, dim=1)
    restore = torch.argsort(order, dim=1)
    return MaskPlan(visible=order[:, :num_patches - m],
                    masked=order[:, num_patches - m:],
                    restore=restore)


@dataclass
class LossBreakdown:
    l_masked: torch.Tensor
    l_unmasked: torch.Tensor
    moe_per_layer: tuple[torch.Tensor, ...]
    l_moe: torch.Tensor
    l_total: torch.Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            "l_masked": float(self.l_masked.detach()),
            "l_unmasked": float(self.l_unmasked.detach()),
            "l_moe": float(self.l_moe.detach()),
            "l_total": float(self.l_total.detach()),
        }


def reconstruction_losses(pred: torch.Tensor, target: torch.Tensor,
                          plan: MaskPlan) -> tuple[torch.Tensor, torch.Tensor]:
    """Squared-error means over masked and visible patches separately.

    Each mean is over every element of the patches in its set; an empty set
    contributes 0.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} != target {tuple(target.shape)}")
    sq = (pred - target) ** 2
    width = sq.shape[-1]

    def _gather_mean(index: torch.Tensor) -> torch.Tensor:
        if index.shape[1] == 0:
            return sq.sum() * 0.0
        picked = torch.gather(sq, 1, index.unsqueeze(-1).expand(-1, -1, width))
        return picked.mean()

    return _gather_mean(plan.masked), _gather_mean(plan.visible)


def total_loss(l_masked: torch.Tensor, l_unmasked: torch.Tensor,
               moe_per_layer: tuple[torch.Tensor, ...],
               alpha: float, beta: float) -> LossBreakdown:
    """L = L_masked + alpha * L_unmasked + beta * sum of per-layer penalties."""
    if moe_per_layer:
        l_moe = torch.stack(list(moe_per_layer)).sum()
    else:
        l_moe = l_masked * 0.0
    return LossBreakdown(
        l_masked=l_masked, l_unmasked=l_unmasked,
        moe_per_layer=tuple(moe_per_layer), l_moe=l_moe,
        l_total=l_masked + alpha * l_unmasked + beta * l_moe,
    )


class ChipMAE(nn.Module):
    """Metadata-aware masked autoencoder with mixture-of-experts blocks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, d_dec = config.embed_dim, config.dec_dim
        n = config.num_patches

        self.patch_embed = nn.Linear(config.patch_values, d)
        self.meta_proj = MetadataProjector(d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.enc_pos = nn.Parameter(torch.zeros(1, PREFIX_TOKENS + n, d))
        self.encoder = nn.ModuleList([
            MoEBlock(d, spec, config.heads, config.kv_groups,
                     noise_enabled=config.noise_enabled,
                     lambda_importance=config.lambda_importance,
                     lambda_load=config.lambda_load,
                     squared_cv=config.squared_cv)
            for spec in config.enc_layers
        ])
        self.enc_norm = nn.LayerNorm(d)

        self.dec_embed = nn.Linear(d, d_dec)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d_dec))
        self.dec_pos = nn.Parameter(torch.zeros(1, PREFIX_TOKENS + n, d_dec))
        self.decoder = nn.ModuleList([
            MoEBlock(d_dec, spec, config.dec_heads, config.dec_kv_groups,
                     noise_enabled=config.noise_enabled,
                     lambda_importance=config.lambda_importance,
                     lambda_load=config.lambda_load,
                     squared_cv=config.squared_cv)
            for spec in config.dec_layers
        ])
        self.dec_norm = nn.LayerNorm(d_dec)
        self.head = nn.Linear(d_dec, config.patch_values)

    # -- initialization ----------------------------------------------------

    def init_parameters(self, generator: torch.Generator | None = None) -> None:
        """All weights ~ N(0, 0.02^2), biases 0, layer norms identity."""
        for tok in (self.cls_token, self.mask_token, self.enc_pos, self.dec_pos):
            _init_weight(tok, generator)
        for lin in (self.patch_embed, self.dec_embed, self.head,
                    *self.meta_proj.projections):
            _init_weight(lin.weight, generator)
            nn.init.zeros_(lin.bias)
        for blk in (*self.encoder, *self.decoder):
            blk.reset_parameters(generator)
        for ln in (self.enc_norm, self.dec_norm):
            nn.init.ones_(ln.weight)
            nn.init.zeros_(ln.bias)

    # -- encoder -----------------------------------------------------------

    def embed_tokens(self, patches: torch.Tensor, meta: torch.Tensor,
                     plan: MaskPlan) -> torch.Tensor:
        """Assemble [week, hour, lat, lon, cls, visible patches] with positions."""
        b, _, d = patches.shape[0], patches.shape[1], self.config.embed_dim
        vis = torch.gather(
            patches, 1,
            plan.visible.unsqueeze(-1).expand(-1, -1, patches.shape[-1]))
        x = self.patch_embed(vis)
        patch_pos = self.enc_pos[:, PREFIX_TOKENS:, :].expand(b, -1, -1)
        x = x + torch.gather(patch_pos, 1,
                             plan.visible.unsqueeze(-1).expand(-1, -1, d))
        prefix = self.meta_proj(meta) + self.enc_pos[:, :PREFIX_TOKENS - 1, :]
        cls = self.cls_token.expand(b, -1, -1) + self.enc_pos[:, PREFIX_TOKENS - 1:PREFIX_TOKENS, :]
        return torch.cat([prefix, cls, x], dim=1)

    def encode(self, patches: torch.Tensor, meta: torch.Tensor, plan: MaskPlan, *,
               generator: torch.Generator | None = None,
               noise: bool | None = None,
               ablate_layer: int | None = None, ablate_expert: int | None = None,
               ablate_mode: str = "renormalize",
               ) -> tuple[torch.Tensor, list[MoEStats]]:
        """Run the encoder over visible tokens; returns tokens and layer stats."""
        x = self.embed_tokens(patches, meta, plan)
        stats: list[MoEStats] = []
        for i, blk in enumerate(self.encoder):
            ablate = ablate_expert if i == ablate_layer else None
            x, st = blk(x, generator=generator, noise=noise,
                        ablate=ablate, ablate_mode=ablate_mode)
            stats.append(st)
        return self.enc_norm(x), stats

    # -- decoder -----------------------------------------------------------

    def decode(self, enc_tokens: torch.Tensor, plan: MaskPlan, *,
               generator: torch.Generator | None = None,
               noise: bool | None = None,
               ) -> tuple[torch.Tensor, list[MoEStats]]:
        """Predict all N patch vectors from encoder output and the mask plan."""
        b = enc_tokens.shape[0]
        y = self.dec_embed(enc_tokens)
        prefix, vis = y[:, :PREFIX_TOKENS, :], y[:, PREFIX_TOKENS:, :]
        fill = self.mask_token.expand(b, plan.num_masked, -1)
        shuffled = torch.cat([vis, fill], dim=1)
        full = torch.gather(
            shuffled, 1,
            plan.restore.unsqueeze(-1).expand(-1, -1, shuffled.shape[-1]))
        x = torch.cat([prefix, full], dim=1) + self.dec_pos
        stats: list[MoEStats] = []
        for blk in self.decoder:
            x, st = blk(x, generator=generator, noise=noise)
            stats.append(st)
        x = self.dec_norm(x)
        return self.head(x[:, PREFIX_TOKENS:, :]), stats

    # -- end to end ----------------------------------------------------------

    def forward(self, pixels: torch.Tensor, meta: torch.Tensor, *,
                generator: torch.Generator | None = None,
                mask_ratio: float | None = None,
                plan: MaskPlan | None = None,
                noise: bool | None = None,
                ) -> tuple[torch.Tensor, MaskPlan, LossBreakdown, list[MoEStats]]:
        """Masked-reconstruction pass over normalized chips.

        pixels: (B, H, W, C); meta: (B, 4, 2) cyclic encodings. Returns patch
        predictions, the mask plan used, the loss breakdown, and per-layer
        encoder routing stats. Only encoder balancing penalties enter the
        objective; decoder routing is left unpenalized.
        """
        cfg = self.config
        patches = patchify(pixels, cfg.patch)
        if plan is None:
            ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
            plan = random_mask(pixels.shape[0], cfg.num_patches, ratio,
                               generator=generator, device=pixels.device)
        enc_tokens, enc_stats = self.encode(patches, meta, plan,
                                            generator=generator, noise=noise)
        pred, _ = self.decode(enc_tokens, plan, generator=generator, noise=noise)
        l_masked, l_unmasked = reconstruction_losses(pred, patches, plan)
        breakdown = total_loss(l_masked, l_unmasked,
                               tuple(st.balance for st in enc_stats),
                               cfg.alpha, cfg.beta)
        return pred, plan, breakdown, enc_stats


# ---------------------------------------------------------------------------
# Parameter census
# ---------------------------------------------------------------------------

def parameter_census(model: ChipMAE) -> dict:
    """Exact integer parameter counts by category, plus sparsity ratios.

    "Expert-unique FFN" counts only the per-expert gate projections (E*h*d per
    layer); the shared V/W2 projections are tallied separately. "Activated"
    removes the (E - k) unselected experts' gate projections per MoE layer
    from the total, since those weights sit idle for any given token.
    """
    cfg = model.config
    d, d_dec = cfg.embed_dim, cfg.dec_dim

    def count(module: nn.Module | nn.Parameter) -> int:
        if isinstance(module, nn.Parameter):
            return module.numel()
        return sum(p.numel() for p in module.parameters())

    per_layer_expert = [spec.experts * spec.hidden * d for spec in cfg.enc_layers]
    per_layer_activated = [spec.top_k * spec.hidden * d for spec in cfg.enc_layers]
    shared_ffn = sum(2 * spec.hidden * d for spec in cfg.enc_layers)
    router = sum(2 * spec.experts * d for spec in cfg.enc_layers)
    attention = sum(count(blk.attn) for blk in model.encoder)
    norms = sum(count(blk.ln1) + count(blk.ln2) for blk in model.encoder)
    norms += count(model.enc_norm)
    embeddings = (count(model.patch_embed) + count(model.meta_proj)
                  + count(model.cls_token) + count(model.enc_pos))
    encoder_total = (sum(per_layer_expert) + shared_ffn + router + attention
                     + norms + embeddings)

    decoder_total = (count(model.dec_embed) + count(model.mask_token)
                     + count(model.dec_pos) + count(model.dec_norm)
                     + count(model.head)
                     + sum(count(blk) for blk in model.decoder))
    total = encoder_total + decoder_total
    actual_total = count(model)
    if total != actual_total:
        raise AssertionError(
            f"census total {total} != parameter count {actual_total}")

    idle = sum((spec.experts - spec.top_k) * spec.hidden * d
               for spec in cfg.enc_layers)
    idle += sum((spec.experts - spec.top_k) * spec.hidden * d_dec
                for spec in cfg.dec_layers)
    activated_total = total - idle

    expert_total = sum(per_layer_expert)
    return {
        "total": total,
        "encoder_total": encoder_total,
        "decoder_total": decoder_total,
        "per_layer_expert_ffn": per_layer_expert,
        "expert_ffn_total": expert_total,
        "expert_ffn_activated": sum(per_layer_activated),
        "expert_ffn_activated_fraction":
            sum(per_layer_activated) / expert_total if expert_total else 1.0,
        "shared_ffn": shared_ffn,
        "router": router,
        "attention": attention,
        "layer_norms": norms,
        "embeddings": embeddings,
        "activated_total": activated_total,
        "activated_fraction": activated_total / total,
        "k_over_experts": [spec.top_k / spec.experts for spec in cfg.enc_layers],
    }
