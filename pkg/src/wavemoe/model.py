"""Dual-path mixture-of-experts forecaster.

Both pathways (time patches and wavelet patches) are embedded separately and
run through their own top-k sparse causal attention.  At every layer a single
MLP router looks at the concatenated pair of representations for each
temporal position and sends *both* tokens to the same experts.  Each expert
holds two feed-forward branches, one per pathway.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError, ContractError, NumericError


@dataclass
class ModelConfig:
    """Architecture hyperparameters.  Defaults reproduce the 12-layer reference model."""

    n_layers: int = 12
    n_heads: int = 12
    n_experts: int = 8
    top_k_experts: int = 2
    hidden_size: int = 384
    ffn_dim: int = 1536
    patch_length: int = 8
    top_k_attention: int = 10
    use_shared_expert: bool = True
    load_balance_coeff: float = 0.01
    wavelet_loss_weight: float = 1.0
    seed: int = 0
    expert_activation: str = "swiglu"
    expert_ffn_dim: Optional[int] = None  # None: ffn_dim // top_k_experts
    shared_ffn_dim: Optional[int] = None  # None: ffn_dim
    router_hidden: Optional[int] = None  # None: hidden_size
    wavelet: str = "bior2.2"
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def routed_width(self) -> int:
        return self.expert_ffn_dim or max(1, self.ffn_dim // self.top_k_experts)

    @property
    def shared_width(self) -> int:
        return self.shared_ffn_dim or self.ffn_dim

    @property
    def router_width(self) -> int:
        return self.router_hidden or self.hidden_size

    def validate(self) -> None:
        positive = ("n_layers", "n_heads", "n_experts", "top_k_experts", "hidden_size",
                    "ffn_dim", "patch_length", "top_k_attention")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_size % self.n_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dimension {self.head_dim} must be even for rotary phases")
        if self.top_k_experts > self.n_experts:
            raise ConfigError(f"top_k_experts {self.top_k_experts} exceeds n_experts {self.n_experts}")
        if self.patch_length % 4:
            raise ConfigError(f"patch_length {self.patch_length} must be a multiple of 4")
        if self.expert_activation not in ("swiglu", "gelu"):
            raise ConfigError(f"unknown expert_activation {self.expert_activation!r}")
        if self.load_balance_coeff < 0 or self.wavelet_loss_weight < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


TINY_CONFIG = dict(
    n_layers=2, n_heads=2, n_experts=4, top_k_experts=2, hidden_size=32, ffn_dim=64,
    patch_length=8, top_k_attention=10,
)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float, **factory):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, **factory))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rotary_tables(n: int, head_dim: int, base: float, dtype, device=None):
    inv = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64, device=device) / head_dim))
    ang = torch.arange(n, dtype=torch.float64, device=device)[:, None] * inv[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rotary(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def topk_mask(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean mask of the ``k`` largest entries along the last axis.

    Ties at the threshold go to the lower index, so the result is fully
    deterministic.  ``-inf`` entries are only selected when fewer than ``k``
    finite entries exist.
    """
    k = min(k, scores.shape[-1])
    kth = torch.topk(scores, k, dim=-1).values[..., -1:]
    above = scores > kth
    ties = scores == kth
    room = k - above.sum(-1, keepdim=True)
    return above | (ties & (ties.cumsum(-1) <= room))


def _causal(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


def topk_causal_keep(scores: torch.Tensor, k: int) -> torch.Tensor:
    """The ``k`` highest-scoring non-future keys per query row (ties to the lower index)."""
    causal = _causal(scores.shape[-1], scores.device)
    return topk_mask(scores.masked_fill(~causal, float("-inf")), k) & causal


def sparse_causal_attention(hidden, wq, wk, wv, wo, n_heads: int, k: int, *,
                            rope=None, keep=None, return_weights: bool = False):
    """Multi-head causal attention keeping only the top-``k`` keys per query.

    ``hidden`` is ``(..., n, d)``; weight matrices use the ``nn.Linear``
    ``(out, in)`` layout.  ``keep`` freezes the key selection (used by the
    finite-difference oracle); otherwise it is computed from the scores.
    Returns ``(output, keep)`` or ``(output, keep, weights)``.
    """
    *lead, n, d = hidden.shape
    hd = d // n_heads

    def heads(t):
        return t.reshape(*lead, n, n_heads, hd).transpose(-2, -3)

    q, key, v = heads(hidden @ wq.T), heads(hidden @ wk.T), heads(hidden @ wv.T)
    if rope is not None:
        cos, sin = rope
        q, key = apply_rotary(q, cos, sin), apply_rotary(key, cos, sin)
    scores = (q @ key.transpose(-1, -2)) / math.sqrt(hd)
    if keep is None:
        keep = topk_causal_keep(scores.detach(), k)
    weights = torch.softmax(scores.masked_fill(~keep, float("-inf")), dim=-1)
    out = (weights @ v).transpose(-2, -3).reshape(*lead, n, d) @ wo.T
    if return_weights:
        return out, keep, weights
    return out, keep


class SparseAttention(nn.Module):
    def __init__(self, config: ModelConfig, **factory):
        super().__init__()
        d = config.hidden_size
        self.n_heads = config.n_heads
        self.k = config.top_k_attention
        self.q_proj = nn.Linear(d, d, bias=False, **factory)
        self.k_proj = nn.Linear(d, d, bias=False, **factory)
        self.v_proj = nn.Linear(d, d, bias=False, **factory)
        self.o_proj = nn.Linear(d, d, bias=False, **factory)

    def forward(self, x, rope=None, keep=None, return_weights=False):
        return sparse_causal_attention(
            x, self.q_proj.weight, self.k_proj.weight, self.v_proj.weight, self.o_proj.weight,
            self.n_heads, self.k, rope=rope, keep=keep, return_weights=return_weights,
        )


class FeedForward(nn.Module):
    """One expert branch: ``d -> hidden -> d`` with GELU, or a SwiGLU gate."""

    def __init__(self, d: int, hidden: int, activation: str, **factory):
        super().__init__()
        self.activation = activation
        self.up = nn.Linear(d, hidden, bias=False, **factory)
        if activation == "swiglu":
            self.gate = nn.Linear(d, hidden, bias=False, **factory)
        self.down = nn.Linear(hidden, d, bias=False, **factory)

    def forward(self, x):
        if self.activation == "swiglu":
            return self.down(F.silu(self.gate(x)) * self.up(x))
        return self.down(F.gelu(self.up(x)))


class DualExpert(nn.Module):
    def __init__(self, d: int, hidden: int, activation: str, **factory):
        super().__init__()
        self.time_branch = FeedForward(d, hidden, activation, **factory)
        self.wavelet_branch = FeedForward(d, hidden, activation, **factory)

    def forward(self, time_h, wavelet_h):
        return self.time_branch(time_h), self.wavelet_branch(wavelet_h)


def expert_apply(time_h, wavelet_h, expert: DualExpert):
    return expert(time_h, wavelet_h)


class Router(nn.Module):
    def __init__(self, config: ModelConfig, **factory):
        super().__init__()
        self.hidden = nn.Linear(2 * config.hidden_size, config.router_width, bias=False, **factory)
        self.out = nn.Linear(config.router_width, config.n_experts, bias=False, **factory)

    def forward(self, time_h, wavelet_h):
        return self.out(F.gelu(self.hidden(torch.cat([time_h, wavelet_h], dim=-1))))


def select_experts(logits: torch.Tensor, k: int, expert_ids=None):
    """Top-``k`` experts per row (ties to the lower index) and gates renormalized over them."""
    if expert_ids is None:
        chosen = topk_mask(logits.detach(), k)
        # indices of the selected experts in ascending order, then by logit
        idx = torch.arange(logits.shape[-1], device=logits.device).expand_as(chosen)
        picked = idx[chosen].reshape(*logits.shape[:-1], k)
        order = torch.sort(logits.detach().gather(-1, picked), dim=-1, descending=True, stable=True).indices
        expert_ids = picked.gather(-1, order)
    gates = torch.softmax(logits.gather(-1, expert_ids), dim=-1)
    return expert_ids, gates


def route_pair(time_h, wavelet_h, router: Router, k: int):
    """Route one temporal position: both tokens get the same expert ids."""
    logits = router(time_h, wavelet_h)
    return select_experts(logits, k)


def load_balance_loss(probs: torch.Tensor, expert_ids: torch.Tensor, n_experts: int) -> torch.Tensor:
    """Switch-style auxiliary loss ``E * sum_e f_e * p_e``.

    ``f_e`` is the fraction of token pairs whose top-k includes ``e`` and
    ``p_e`` the mean full-softmax router probability of ``e``.
    """
    probs = probs.reshape(-1, n_experts)
    ids = expert_ids.reshape(-1, expert_ids.shape[-1])
    counts = torch.zeros(n_experts, dtype=probs.dtype, device=probs.device)
    counts.index_add_(0, ids.reshape(-1), torch.ones(ids.numel(), dtype=probs.dtype, device=probs.device))
    frac = counts / ids.shape[0]
    return n_experts * (frac * probs.mean(0)).sum()


@dataclass
class RoutingInfo:
    expert_ids: torch.Tensor  # (..., n, k)
    gates: torch.Tensor  # (..., n, k)
    probs: torch.Tensor  # (..., n, E)
    balance_loss: torch.Tensor


class MoELayer(nn.Module):
    def __init__(self, config: ModelConfig, **factory):
        super().__init__()
        self.k = config.top_k_experts
        self.n_experts = config.n_experts
        self.router = Router(config, **factory)
        self.experts = nn.ModuleList(
            DualExpert(config.hidden_size, config.routed_width, config.expert_activation, **factory)
            for _ in range(config.n_experts)
        )
        self.shared_expert = (
            DualExpert(config.hidden_size, config.shared_width, config.expert_activation, **factory)
            if config.use_shared_expert else None
        )

    def forward(self, time_h, wavelet_h, expert_ids=None):
        logits = self.router(time_h, wavelet_h)
        ids, gates = select_experts(logits, self.k, expert_ids)
        probs = torch.softmax(logits, dim=-1)
        d = time_h.shape[-1]
        flat_t = time_h.reshape(-1, d)
        flat_w = wavelet_h.reshape(-1, d)
        flat_ids = ids.reshape(-1, self.k)
        flat_gates = gates.reshape(-1, self.k)
        out_t = torch.zeros_like(flat_t)
        out_w = torch.zeros_like(flat_w)
        for e, expert in enumerate(self.experts):
            hit = flat_ids == e
            rows = hit.any(-1).nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            w = (flat_gates[rows] * hit[rows]).sum(-1, keepdim=True)
            yt, yw = expert(flat_t[rows], flat_w[rows])
            out_t = out_t.index_add(0, rows, w * yt)
            out_w = out_w.index_add(0, rows, w * yw)
        out_t = out_t.reshape(time_h.shape)
        out_w = out_w.reshape(wavelet_h.shape)
        if self.shared_expert is not None:
            st, sw = self.shared_expert(time_h, wavelet_h)
            out_t = out_t + st
            out_w = out_w + sw
        balance = load_balance_loss(probs, ids, self.n_experts)
        return out_t, out_w, RoutingInfo(ids, gates, probs, balance)


def moe_layer(time_h, wavelet_h, layer: MoELayer, expert_ids=None):
    """Route, mix the selected experts, add the shared expert and the residual."""
    dt, dw, info = layer(time_h, wavelet_h, expert_ids)
    return time_h + dt, wavelet_h + dw, info.balance_loss


class Block(nn.Module):
    def __init__(self, config: ModelConfig, **factory):
        super().__init__()
        d, eps = config.hidden_size, config.norm_eps
        self.time_attn_norm = RMSNorm(d, eps, **factory)
        self.wavelet_attn_norm = RMSNorm(d, eps, **factory)
        self.time_attn = SparseAttention(config, **factory)
        self.wavelet_attn = SparseAttention(config, **factory)
        self.time_moe_norm = RMSNorm(d, eps, **factory)
        self.wavelet_moe_norm = RMSNorm(d, eps, **factory)
        self.moe = MoELayer(config, **factory)

    def forward(self, t, w, rope, selection=None):
        selection = selection or {}
        at, keep_t = self.time_attn(self.time_attn_norm(t), rope, selection.get("time_keep"))
        aw, keep_w = self.wavelet_attn(self.wavelet_attn_norm(w), rope, selection.get("wavelet_keep"))
        t, w = t + at, w + aw
        mt, mw, info = self.moe(self.time_moe_norm(t), self.wavelet_moe_norm(w), selection.get("expert_ids"))
        chosen = {"time_keep": keep_t, "wavelet_keep": keep_w, "expert_ids": info.expert_ids}
        return t + mt, w + mw, info, chosen


@dataclass
class ForwardTrace:
    """Forward outputs.  ``time_out``/``wavelet_out`` hold a next-patch prediction per position."""

    time_out: torch.Tensor
    wavelet_out: torch.Tensor
    routing: list[RoutingInfo]
    balance_loss: torch.Tensor
    selections: list[dict] = field(default_factory=list)

    @property
    def time_predictions(self):
        return self.time_out[..., :-1, :]

    @property
    def wavelet_predictions(self):
        return self.wavelet_out[..., :-1, :]


class WaveMoE(nn.Module):
    def __init__(self, config: ModelConfig, dtype=torch.float32, device=None):
        super().__init__()
        factory = {"dtype": dtype, "device": device}
        self.config = config
        d, P = config.hidden_size, config.patch_length
        self.time_embed = nn.Linear(P, d, **factory)
        self.wavelet_embed = nn.Linear(P, d, **factory)
        self.blocks = nn.ModuleList(Block(config, **factory) for _ in range(config.n_layers))
        self.time_norm = RMSNorm(d, config.norm_eps, **factory)
        self.wavelet_norm = RMSNorm(d, config.norm_eps, **factory)
        self.time_head = nn.Linear(d, P, **factory)
        self.wavelet_head = nn.Linear(d, P, **factory)

    @property
    def dtype(self):
        return self.time_embed.weight.dtype

    def forward(self, time_patches, wavelet_patches, selections=None) -> ForwardTrace:
        P = self.config.patch_length
        t_in = torch.as_tensor(time_patches, dtype=self.dtype)
        w_in = torch.as_tensor(wavelet_patches, dtype=self.dtype)
        if t_in.shape != w_in.shape or t_in.ndim < 2 or t_in.shape[-1] != P:
            raise ContractError(
                f"expected matching (..., n, {P}) inputs, got {tuple(t_in.shape)} and {tuple(w_in.shape)}"
            )
        n = t_in.shape[-2]
        rope = rotary_tables(n, self.config.head_dim, self.config.rope_base, self.dtype, t_in.device)
        t, w = self.time_embed(t_in), self.wavelet_embed(w_in)
        routing, chosen = [], []
        for i, block in enumerate(self.blocks):
            t, w, info, sel = block(t, w, rope, selections[i] if selections else None)
            routing.append(info)
            chosen.append(sel)
        balance = torch.stack([r.balance_loss for r in routing]).mean()
        return ForwardTrace(
            time_out=self.time_head(self.time_norm(t)),
            wavelet_out=self.wavelet_head(self.wavelet_norm(w)),
            routing=routing,
            balance_loss=balance,
            selections=chosen,
        )


def init_model(config: ModelConfig, dtype=torch.float32) -> WaveMoE:
    """Build a model with deterministic weights drawn from ``config.seed``.

    Linear weights are uniform in ``±1/sqrt(fan_in)``; biases start at zero and
    normalization gains at one.
    """
    config.validate()
    model = WaveMoE(config, dtype=dtype)
    rng = np.random.default_rng(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".weight") and p.ndim == 2:
                bound = 1.0 / math.sqrt(p.shape[1])
                p.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(p.shape))))
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.fill_(1.0)
    return model


def _ffn_params(d: int, hidden: int, activation: str) -> int:
    return (3 if activation == "swiglu" else 2) * d * hidden


def parameter_counts(config: ModelConfig) -> dict:
    """Closed-form total and activated parameter counts.

    Activated counts every dense part plus ``top_k_experts`` routed experts
    and the shared expert when enabled.
    """
    d, P, E, k = config.hidden_size, config.patch_length, config.n_experts, config.top_k_experts
    act = config.expert_activation
    embed = 2 * (P * d + d)
    heads = 2 * (d * P + P)
    final_norms = 2 * d
    attention = 2 * 4 * d * d
    norms = 4 * d
    router = 2 * d * config.router_width + config.router_width * E
    expert = 2 * _ffn_params(d, config.routed_width, act)
    shared = 2 * _ffn_params(d, config.shared_width, act) if config.use_shared_expert else 0
    per_layer_dense = attention + norms + router + shared
    L = config.n_layers
    total = embed + heads + final_norms + L * (per_layer_dense + E * expert)
    activated = embed + heads + final_norms + L * (per_layer_dense + k * expert)
    return {
        "total": total,
        "activated": activated,
        "embeddings": embed,
        "heads": heads,
        "attention": L * attention,
        "router": L * router,
        "routed_experts": L * E * expert,
        "shared_expert": L * shared,
        "norms": L * norms + final_norms,
        "use_shared_expert": config.use_shared_expert,
    }


def count_parameters(model: WaveMoE) -> dict:
    """Enumerate parameters of an instantiated model (total and activated)."""
    total = sum(p.numel() for p in model.parameters())
    cfg = model.config
    per_expert = sum(p.numel() for p in model.blocks[0].moe.experts[0].parameters()) if cfg.n_layers else 0
    inactive = cfg.n_layers * (cfg.n_experts - cfg.top_k_experts) * per_expert
    return {"total": total, "activated": total - inactive}


def meta_model(config: ModelConfig) -> WaveMoE:
    """Instantiate without allocating storage, for counting large configurations."""
    return WaveMoE(config, device="meta")


def loss_and_gradients(model: WaveMoE, batch, selections=None, delta: float = 1.0):
    """Joint loss, its components, and exact gradients for every parameter.

    Hard top-k choices (attention keys, experts) are constants of the forward
    pass; parameters that received no gradient report exact zeros.
    """
    from .losses import joint_loss

    model.zero_grad(set_to_none=True)
    trace = model(batch.time_patches, batch.wavelet_patches, selections)
    total, parts = joint_loss(trace, batch, model.config, delta)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss {float(total)} (components: {parts})")
    total.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return total.item(), parts, grads


def gradients(model: WaveMoE, batch, selections=None, delta: float = 1.0) -> dict[str, torch.Tensor]:
    return loss_and_gradients(model, batch, selections, delta)[2]
