"""Mixture-of-Experts transformer machinery.

Noisy top-k token routing, a smooth per-expert load estimator, coefficient-of
variation balancing penalties, SwiGLU expert banks with shared value/output
projections, grouped-query attention, and the pre-norm block that ties them
together. Everything here is dimension-generic; encoder and decoder reuse the
same block with different sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import LayerSpec


def _init_weight(param: torch.Tensor, generator: torch.Generator | None,
                 std: float = 0.02) -> None:
    with torch.no_grad():
        param.normal_(0.0, std, generator=generator)


@dataclass
class RouterOutput:
    """Routing decision for a flat batch of T tokens over E experts."""

    indices: torch.Tensor       # (T, k) selected expert ids, weight-descending
    weights: torch.Tensor       # (T, k) softmax weights over the selected logits
    gates: torch.Tensor         # (T, E) dense; zeros off the selection
    clean_logits: torch.Tensor  # (T, E)
    noisy_logits: torch.Tensor  # (T, E); equals clean when noise is off
    noise_std: torch.Tensor | None  # (T, E) softplus noise scale, None when off
    prob_in_topk: torch.Tensor  # (T, E) smooth selection probability
    load: torch.Tensor          # (E,) column sums of prob_in_topk


def _normal_cdf(x: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    # Tiny guard keeps the zero-noise limit finite: P collapses to 0/1.
    return 0.5 * (1.0 + torch.erf(x / (std * math.sqrt(2.0) + 1e-20)))


class NoisyTopKRouter(nn.Module):
    """Selects k experts per token from logits perturbed by learned noise.

    Logits are H = W_g z + eps * softplus(W_noise z) with eps ~ N(0,1) when
    noise is enabled, else H = W_g z. The k largest entries of H win, ties
    going to the lower expert index, and the routing weights are the softmax
    over those k noisy logits.
    """

    def __init__(self, dim: int, num_experts: int, top_k: int, *,
                 noise_enabled: bool = True):
        super().__init__()
        if not 1 <= top_k <= num_experts:
            raise ValueError(f"top_k={top_k} outside [1, {num_experts}]")
        self.dim = dim
        self.num_experts = num_experts
        self.top_k = top_k
        self.noise_enabled = noise_enabled
        self.w_gate = nn.Parameter(torch.empty(num_experts, dim))
        self.w_noise = nn.Parameter(torch.empty(num_experts, dim))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        _init_weight(self.w_gate, generator)
        _init_weight(self.w_noise, generator)

    def forward(self, z: torch.Tensor, *, generator: torch.Generator | None = None,
                noise: bool | None = None,
                exclude: int | None = None) -> RouterOutput:
        """Route flat tokens (T, d). ``exclude`` removes one expert from the pool."""
        if z.dim() != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected (T, {self.dim}) tokens, got {tuple(z.shape)}")
        use_noise = self.noise_enabled if noise is None else noise
        clean = z @ self.w_gate.t()
        if use_noise:
            std = F.softplus(z @ self.w_noise.t())
            eps = torch.empty_like(clean).normal_(generator=generator)
            noisy = clean + eps * std
        else:
            std = None
            noisy = clean

        pool = noisy
        if exclude is not None:
            if not 0 <= exclude < self.num_experts:
                raise ValueError(f"exclude={exclude} out of range")
            pool = noisy.clone()
            pool[:, exclude] = float("-inf")
        # Stable descending sort: equal logits keep index order, so ties go to
        # the lower expert index.
        sorted_vals, sorted_idx = torch.sort(pool, dim=-1, descending=True,
                                             stable=True)
        k = self.top_k
        indices = sorted_idx[:, :k]
        weights = torch.softmax(sorted_vals[:, :k], dim=-1)
        gates = torch.zeros_like(clean).scatter(1, indices, weights)

        prob = self._prob_in_topk(clean, noisy, std, sorted_vals,
                                  gates, exclude=exclude)
        return RouterOutput(
            indices=indices, weights=weights, gates=gates,
            clean_logits=clean, noisy_logits=noisy, noise_std=std,
            prob_in_topk=prob, load=prob.sum(dim=0),
        )

    def _prob_in_topk(self, clean: torch.Tensor, noisy: torch.Tensor,
                      std: torch.Tensor | None, sorted_vals: torch.Tensor,
                      gates: torch.Tensor, *, exclude: int | None) -> torch.Tensor:
        """Per-token probability of each expert landing in the top k.

        For expert e the relevant threshold is the k-th largest noisy logit
        among the *other* experts: the (k+1)-th overall value when e is
        currently selected, the k-th otherwise. The probability is the
        Gaussian CDF of the clean logit's margin over that threshold at e's
        own noise scale. With noise disabled this collapses to the hard
        selection indicator.
        """
        k = self.top_k
        pool_size = self.num_experts - (1 if exclude is not None else 0)
        if k >= pool_size:
            prob = torch.ones_like(clean)
        elif std is None:
            prob = (gates > 0).to(clean.dtype)
        else:
            threshold_if_in = sorted_vals[:, k:k + 1]
            threshold_if_out = sorted_vals[:, k - 1:k]
            is_in = noisy > threshold_if_in
            prob_if_in = _normal_cdf(clean - threshold_if_in, std)
            prob_if_out = _normal_cdf(clean - threshold_if_out, std)
            prob = torch.where(is_in, prob_if_in, prob_if_out)
        if exclude is not None:
            prob = prob.clone()
            prob[:, exclude] = 0.0
        return prob


def coefficient_of_variation(values: torch.Tensor, *,
                             squared: bool = True) -> torch.Tensor:
    """Population-std-over-mean dispersion of a vector, optionally squared.

    Returns 0 when the mean is at or below 1e-12 (degenerate guard). The
    squared form avoids the sqrt and stays differentiable at uniformity.
    """
    if values.numel() == 0:
        raise ValueError("cv of an empty vector")
    mean = values.mean()
    if float(mean.detach()) <= 1e-12:
        return values.sum() * 0.0
    var = values.var(unbiased=False)
    ratio = var / (mean * mean)
    return ratio if squared else ratio.sqrt()


def balance_loss(importance: torch.Tensor, load: torch.Tensor,
                 lambda_importance: float = 1.0, lambda_load: float = 1.0,
                 *, squared: bool = True) -> torch.Tensor:
    """lambda_imp * CV(importance)^2 + lambda_load * CV(load)^2 (or plain CV)."""
    imp_term = coefficient_of_variation(importance, squared=squared)
    load_term = coefficient_of_variation(load, squared=squared)
    return lambda_importance * imp_term + lambda_load * load_term


class SwiGLUExperts(nn.Module):
    """E gated experts sharing one value projection V and one output W2.

    Expert e computes W2 (SiLU(W1_e z) * (V z)); only W1 is per-expert, so
    the bank costs (E + 2) * hidden * dim parameters and no biases.
    """

    def __init__(self, dim: int, hidden: int, num_experts: int):
        super().__init__()
        self.dim = dim
        self.hidden = hidden
        self.num_experts = num_experts
        self.w1 = nn.Parameter(torch.empty(num_experts, hidden, dim))
        self.v = nn.Parameter(torch.empty(hidden, dim))
        self.w2 = nn.Parameter(torch.empty(dim, hidden))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for p in (self.w1, self.v, self.w2):
            _init_weight(p, generator)

    def hidden_activation(self, z: torch.Tensor, expert: int,
                          vz: torch.Tensor | None = None) -> torch.Tensor:
        """SiLU(W1_e z) * (V z) for flat tokens, before the shared W2."""
        if not 0 <= expert < self.num_experts:
            raise IndexError(f"expert {expert} out of range")
        if vz is None:
            vz = z @ self.v.t()
        return F.silu(z @ self.w1[expert].t()) * vz

    def single(self, z: torch.Tensor, expert: int) -> torch.Tensor:
        """Full output of one expert on flat tokens (T, d) -> (T, d)."""
        return self.hidden_activation(z, expert) @ self.w2.t()


def ablate_gates(gates: torch.Tensor, expert: int,
                 renormalize: bool = True) -> torch.Tensor:
    """Zero one expert's gate column; optionally renormalize affected rows.

    Rows that never used the expert are returned with bit-identical values.
    Rows whose entire weight sat on the ablated expert end up all-zero (the
    token keeps only its residual path).
    """
    if not 0 <= expert < gates.shape[1]:
        raise IndexError(f"expert {expert} out of range")
    out = gates.clone()
    affected = out[:, expert] > 0
    out[:, expert] = 0.0
    if renormalize and bool(affected.any()):
        rows = out[affected]
        row_sum = rows.sum(dim=-1, keepdim=True)
        out[affected] = torch.where(row_sum > 0, rows / row_sum,
                                    torch.zeros_like(rows))
    return out


@dataclass
class MoEStats:
    """Per-layer routing summary used for balancing and analysis."""

    importance: torch.Tensor  # (E,) column sums of the gate matrix
    load: torch.Tensor        # (E,) summed smooth selection probabilities
    balance: torch.Tensor     # scalar balancing penalty for this layer
    gates: torch.Tensor       # (T, E)
    indices: torch.Tensor     # (T, k)


class MoEFeedForward(nn.Module):
    """Sparse FFN: route each token to k experts, mix their SwiGLU outputs.

    Unselected experts are never evaluated. Thanks to the shared output
    projection, per-expert hidden activations are accumulated with their
    gate weights and W2 is applied once per token.
    """

    def __init__(self, dim: int, hidden: int, num_experts: int, top_k: int, *,
                 noise_enabled: bool = True,
                 lambda_importance: float = 1.0, lambda_load: float = 1.0,
                 squared_cv: bool = True):
        super().__init__()
        self.router = NoisyTopKRouter(dim, num_experts, top_k,
                                      noise_enabled=noise_enabled)
        self.experts = SwiGLUExperts(dim, hidden, num_experts)
        self.lambda_importance = lambda_importance
        self.lambda_load = lambda_load
        self.squared_cv = squared_cv

    @classmethod
    def from_spec(cls, dim: int, spec: LayerSpec, **kw) -> "MoEFeedForward":
        return cls(dim, spec.hidden, spec.experts, spec.top_k, **kw)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        self.router.reset_parameters(generator)
        self.experts.reset_parameters(generator)

    def forward(self, x: torch.Tensor, *, generator: torch.Generator | None = None,
                noise: bool | None = None, ablate: int | None = None,
                ablate_mode: str = "renormalize") -> tuple[torch.Tensor, MoEStats]:
        """(..., d) -> (..., d) plus routing stats over the flattened tokens."""
        shape = x.shape
        z = x.reshape(-1, shape[-1])
        if ablate is not None and ablate_mode == "reroute":
            route = self.router(z, generator=generator, noise=noise, exclude=ablate)
            gates = route.gates
        else:
            route = self.router(z, generator=generator, noise=noise)
            gates = route.gates
            if ablate is not None:
                if ablate_mode != "renormalize":
                    raise ValueError(f"unknown ablate_mode {ablate_mode!r}")
                gates = ablate_gates(route.gates, ablate)

        vz = z @ self.experts.v.t()
        acc = torch.zeros(z.shape[0], self.experts.hidden,
                          dtype=z.dtype, device=z.device)
        for e in range(self.experts.num_experts):
            sel = (gates[:, e] > 0).nonzero(as_tuple=True)[0]
            if sel.numel() == 0:
                continue
            h_e = self.experts.hidden_activation(z[sel], e, vz=vz[sel])
            acc = acc.index_add(0, sel, gates[sel, e].unsqueeze(1) * h_e)
        y = acc @ self.experts.w2.t()

        importance = route.gates.sum(dim=0)
        stats = MoEStats(
            importance=importance,
            load=route.load,
            balance=balance_loss(importance, route.load,
                                 self.lambda_importance, self.lambda_load,
                                 squared=self.squared_cv),
            gates=gates,
            indices=route.indices,
        )
        return y.reshape(shape), stats


class GroupedQueryAttention(nn.Module):
    """Multi-head attention where query heads share grouped key/value heads.

    n_heads query heads attend with n_groups KV heads (n_groups divides
    n_heads); keys and values are projected to n_groups * head_dim instead of
    the full model dim. All projections are bias-free. Full bidirectional
    attention, no masking.
    """

    def __init__(self, dim: int, num_heads: int, kv_groups: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        if num_heads % kv_groups:
            raise ValueError(f"heads {num_heads} not divisible by groups {kv_groups}")
        self.num_heads = num_heads
        self.kv_groups = kv_groups
        self.head_dim = dim // num_heads
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, kv_groups * self.head_dim, bias=False)
        self.wv = nn.Linear(dim, kv_groups * self.head_dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for lin in (self.wq, self.wk, self.wv, self.wo):
            _init_weight(lin.weight, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q = self.wq(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(b, t, self.kv_groups, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(b, t, self.kv_groups, self.head_dim).transpose(1, 2)
        share = self.num_heads // self.kv_groups
        k = k.repeat_interleave(share, dim=1)
        v = v.repeat_interleave(share, dim=1)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = torch.softmax(attn, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, t, d)
        return self.wo(out)


class MoEBlock(nn.Module):
    """Pre-norm transformer block: attention then sparse MoE FFN, residual both."""

    def __init__(self, dim: int, spec: LayerSpec, num_heads: int, kv_groups: int, *,
                 noise_enabled: bool = True,
                 lambda_importance: float = 1.0, lambda_load: float = 1.0,
                 squared_cv: bool = True):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = GroupedQueryAttention(dim, num_heads, kv_groups)
        self.ln2 = nn.LayerNorm(dim)
        self.moe = MoEFeedForward.from_spec(
            dim, spec, noise_enabled=noise_enabled,
            lambda_importance=lambda_importance, lambda_load=lambda_load,
            squared_cv=squared_cv)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        self.attn.reset_parameters(generator)
        self.moe.reset_parameters(generator)
        for ln in (self.ln1, self.ln2):
            nn.init.ones_(ln.weight)
            nn.init.zeros_(ln.bias)

    def forward(self, x: torch.Tensor, *, generator: torch.Generator | None = None,
                noise: bool | None = None, ablate: int | None = None,
                ablate_mode: str = "renormalize") -> tuple[torch.Tensor, MoEStats]:
        x = x + self.attn(self.ln1(x))
        y, stats = self.moe(self.ln2(x), generator=generator, noise=noise,
                            ablate=ablate, ablate_mode=ablate_mode)
        return x + y, stats
