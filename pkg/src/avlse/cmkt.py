"""Cross-modal knowledge transfer between the audio-visual bottleneck and linguistic embeddings.

Only used while training: nothing in :mod:`avlse.sampler` imports this module.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

NORM_FLOOR = 1e-12

MHCA = "MHCA"
OT = "OT"


@dataclass
class CmktConfig:
    variant: str = MHCA
    mhca_layers: int = 6
    heads: int = 4
    text_dim: int = 768
    vocab_size: int = 42
    sinkhorn_temperature: float = 0.5
    sinkhorn_iterations: int = 20
    adapter_gain: float = 0.1
    align_weight: Optional[float] = None
    denoiser_weight: float = 0.5

    def __post_init__(self):
        if self.variant not in (MHCA, OT):
            raise ValueError(f"unknown CMKT variant {self.variant!r}")
        if self.align_weight is None:
            self.align_weight = 0.2 if self.variant == MHCA else 0.01
        if self.align_weight < 0 or self.adapter_gain < 0:
            raise ValueError("CMKT weights must be non-negative")
        if not 0.0 <= self.denoiser_weight <= 1.0:
            raise ValueError("denoiser_weight must lie in [0, 1]")
        if self.mhca_layers < 1:
            raise ValueError("need at least one MHCA layer")

    def to_dict(self):
        return asdict(self)


def _unit_rows(x: torch.Tensor):
    norms = x.norm(dim=-1, keepdim=True)
    floored = (norms < NORM_FLOOR).squeeze(-1)
    return x / norms.clamp_min(NORM_FLOOR), floored


def cosine_cost(Z: torch.Tensor, H: torch.Tensor, diagnostics: Optional[dict] = None) -> torch.Tensor:
    """C_ij = 1 - cos(z_i, h_j), shape (T_t, T_a)."""
    if Z.shape[-1] != H.shape[-1]:
        raise ValueError(f"feature widths differ: {Z.shape[-1]} vs {H.shape[-1]}")
    zu, zf = _unit_rows(Z)
    hu, hf = _unit_rows(H)
    if diagnostics is not None:
        diagnostics["zero_rows_z"] = zf.nonzero().flatten().tolist()
        diagnostics["zero_rows_h"] = hf.nonzero().flatten().tolist()
    return 1.0 - zu @ hu.transpose(-2, -1)


def sinkhorn(C: torch.Tensor, temperature: float = 0.5, iterations: int = 20) -> torch.Tensor:
    """gamma^0 = exp(-C/temperature), then ``iterations`` x (row-normalise, column-normalise)."""
    if temperature <= 0:
        raise ValueError("Sinkhorn temperature must be positive")
    if not torch.isfinite(C).all():
        raise ValueError("cost matrix has non-finite entries")
    floor = 1e-300 if C.dtype == torch.float64 else torch.finfo(C.dtype).tiny
    gamma = torch.exp(-C / temperature).clamp_min(floor)
    for _ in range(iterations):
        gamma = gamma / gamma.sum(dim=-1, keepdim=True)
        gamma = gamma / gamma.sum(dim=-2, keepdim=True)
    return gamma


def ot_fuse(gamma: torch.Tensor, H_proj: torch.Tensor) -> torch.Tensor:
    if gamma.shape[-1] != H_proj.shape[-2]:
        raise ValueError(f"plan {tuple(gamma.shape)} does not compose with features {tuple(H_proj.shape)}")
    return gamma @ H_proj


def ot_loss(gamma: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    """sum_ij gamma_ij C_ij with the plan held constant."""
    if gamma.shape != C.shape:
        raise ValueError("plan and cost shapes differ")
    return (gamma.detach() * C).sum()


def align_loss(Z: torch.Tensor, Z_fused: torch.Tensor) -> torch.Tensor:
    """Mean over tokens of 1 - cos(z_i, z~_i)."""
    if Z.shape != Z_fused.shape:
        raise ValueError(f"shape mismatch {tuple(Z.shape)} vs {tuple(Z_fused.shape)}")
    a, _ = _unit_rows(Z)
    b, _ = _unit_rows(Z_fused)
    return (1.0 - (a * b).sum(-1)).mean()


def total_loss(variant: str, l_den, l_score, l_align, l_opt, cfg: CmktConfig):
    """Weighted sum of the training losses. ``variant`` is MHCA, OT, or None for no linguistic terms."""
    parts = {"denoiser": l_den, "score": l_score}
    if variant is not None:
        parts["align"] = l_align
        if variant == OT:
            parts["opt"] = l_opt
    for name, val in parts.items():
        v = float(val.detach()) if torch.is_tensor(val) else float(val)
        if not math.isfinite(v):
            raise ValueError(f"non-finite {name} loss: {v}")
    w = cfg.denoiser_weight
    total = w * l_den + (1 - w) * l_score
    if variant == MHCA:
        total = total + cfg.align_weight * l_align
    elif variant == OT:
        total = total + cfg.align_weight * (l_align + l_opt)
    elif variant is not None:
        raise ValueError(f"unknown variant {variant!r}")
    return total


def positional_encoding(n: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(n, dtype=dtype)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe


class MHCALayer(nn.Module):
    """Linguistic queries attend to projected audio-visual tokens (pre-norm, residual)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, z, h):
        kv = self.norm_kv(h)
        out, _ = self.attn(self.norm_q(z), kv, kv, need_weights=False)
        return z + out


class MHCAFusion(nn.Module):
    def __init__(self, cfg: CmktConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.layers = nn.ModuleList(MHCALayer(cfg.text_dim, cfg.heads) for _ in range(cfg.mhca_layers))
        self.norm = nn.LayerNorm(cfg.text_dim)
        self.head = nn.Linear(cfg.text_dim, cfg.text_dim)

    def forward(self, H_proj: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id outside vocabulary of {self.cfg.vocab_size}")
        z = self.embed(ids) + positional_encoding(ids.shape[-1], self.cfg.text_dim, self.embed.weight.dtype)
        batched = H_proj.dim() == 3
        z = z if z.dim() == 3 else z[None]
        h = H_proj if batched else H_proj[None]
        for layer in self.layers:
            z = layer(z, h)
        out = self.head(self.norm(z))
        return out if batched else out[0]


class CMKT(nn.Module):
    """FC1 projection, a fusion route (MHCA or OT), and the FC2 adapter."""

    def __init__(self, cfg: CmktConfig, audio_dim: int):
        super().__init__()
        self.cfg = cfg
        self.fc1 = nn.Linear(audio_dim, cfg.text_dim)
        self.fc2 = nn.Linear(cfg.text_dim, audio_dim)
        self.fusion = MHCAFusion(cfg) if cfg.variant == MHCA else None
        self.H: Optional[torch.Tensor] = None
        self.H_proj: Optional[torch.Tensor] = None

    def project(self, H: torch.Tensor) -> torch.Tensor:
        if H.shape[-1] != self.fc1.in_features:
            raise ValueError(f"expected width {self.fc1.in_features}, got {H.shape[-1]}")
        return self.fc1(H)

    def adapter(self, H: torch.Tensor, H_proj: torch.Tensor) -> torch.Tensor:
        if H_proj.shape[-1] != self.fc2.in_features or H.shape[-1] != self.fc2.out_features:
            raise ValueError("adapter dimension mismatch")
        return H + self.cfg.adapter_gain * self.fc2(H_proj)

    def hook(self, H: torch.Tensor) -> torch.Tensor:
        """Bottleneck hook: records H and FC1(H), returns the adapted features."""
        self.H = H
        self.H_proj = self.project(H)
        return self.adapter(H, self.H_proj)

    def losses(self, Z: torch.Tensor, token_ids: torch.Tensor):
        """(L_align, L_OPT, fused) for the tokens recorded by the last :meth:`hook` call."""
        if self.H_proj is None:
            raise RuntimeError("no bottleneck features recorded")
        Hp = self.H_proj[0] if self.H_proj.dim() == 3 else self.H_proj
        if self.cfg.variant == MHCA:
            fused = self.fusion(Hp, token_ids)
            return align_loss(Z, fused), torch.zeros((), dtype=Hp.dtype), fused
        C = cosine_cost(Z, Hp)
        gamma = sinkhorn(C, self.cfg.sinkhorn_temperature, self.cfg.sinkhorn_iterations)
        fused = ot_fuse(gamma, Hp)
        return align_loss(Z, fused), ot_loss(gamma, C), fused
