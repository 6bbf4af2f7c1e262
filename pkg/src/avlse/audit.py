"""Finite-difference gradient audit over every differentiable block."""
from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import torch
from torch import nn

from .cmkt import CMKT, CmktConfig, MHCAFusion, align_loss, cosine_cost, ot_fuse, ot_loss, sinkhorn
from .model import CrossAttention, Denoiser, NetworkConfig, ScoreModel
from .numerics import grad_check
from .sde import OUVESDE, complex_normal
from .trainer import score_residual_loss, spectral_mse_loss


def _weighted(out: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    # random projection so the scalar depends on every output entry
    return (out * w).sum()


def audit_cases(seed: int = 0, network: NetworkConfig | None = None, sde: OUVESDE | None = None) -> List[Tuple[str, Callable[[], torch.Tensor], Dict[str, torch.Tensor]]]:
    torch.manual_seed(seed)
    dt = torch.float64
    cases = []

    lin = nn.Linear(5, 3).to(dt)
    x = torch.randn(4, 5, dtype=dt)
    w = torch.randn(4, 3, dtype=dt)
    cases.append(("linear", lambda: _weighted(lin(x), w), dict(lin.named_parameters())))

    ln = nn.LayerNorm(6).to(dt)
    with torch.no_grad():
        ln.weight.add_(0.3 * torch.randn(6, dtype=dt))
        ln.bias.add_(0.3 * torch.randn(6, dtype=dt))
    xl = torch.randn(3, 6, dtype=dt, requires_grad=True)
    wl = torch.randn(3, 6, dtype=dt)
    cases.append(("layer_norm", lambda: _weighted(ln(xl), wl), {**dict(ln.named_parameters()), "input": xl}))

    ca = CrossAttention(8, 6, 2).to(dt)
    h = torch.randn(1, 8, 2, 3, dtype=dt, requires_grad=True)
    v = torch.randn(1, 4, 6, dtype=dt, requires_grad=True)
    fs = torch.arange(3, dtype=dt) * 0.008
    vs = (torch.arange(4, dtype=dt) + 0.5) / 25
    wa = torch.randn(1, 8, 2, 3, dtype=dt)
    cases.append(("cross_attention", lambda: _weighted(ca(h, v, fs, vs), wa), {**dict(ca.named_parameters()), "audio": h, "visual": v}))

    ccfg = CmktConfig(variant="MHCA", mhca_layers=2, heads=4, text_dim=16, vocab_size=10)
    cm = CMKT(ccfg, audio_dim=4).to(dt)
    H = torch.randn(6, 4, dtype=dt, requires_grad=True)
    wf = torch.randn(6, 16, dtype=dt)
    cases.append(("fc1_projection", lambda: _weighted(cm.project(H), wf), {**dict(cm.fc1.named_parameters()), "H": H}))
    Hp = torch.randn(6, 16, dtype=dt, requires_grad=True)
    wad = torch.randn(6, 4, dtype=dt)
    cases.append(("fc2_adapter", lambda: _weighted(cm.adapter(H, Hp), wad), {**dict(cm.fc2.named_parameters()), "H": H, "H_proj": Hp}))

    fusion = MHCAFusion(ccfg).to(dt)
    ids = torch.tensor([0, 3, 7, 1])
    Hk = torch.randn(6, 16, dtype=dt, requires_grad=True)
    wm = torch.randn(4, 16, dtype=dt)
    cases.append(("mhca_stack", lambda: _weighted(fusion(Hk, ids), wm), {**dict(fusion.named_parameters()), "H_proj": Hk}))

    Z = torch.randn(4, 8, dtype=dt, requires_grad=True)
    Zf = torch.randn(4, 8, dtype=dt, requires_grad=True)
    cases.append(("align_loss", lambda: align_loss(Z, Zf), {"Z": Z, "Z_fused": Zf}))
    Ha = torch.randn(5, 8, dtype=dt, requires_grad=True)
    wc = torch.randn(4, 5, dtype=dt)
    cases.append(("cosine_cost", lambda: _weighted(cosine_cost(Z, Ha), wc), {"Z": Z, "H": Ha}))
    # the transport plan is a constant of the alignment loss, so it is held fixed here
    with torch.no_grad():
        plan = sinkhorn(cosine_cost(Z, Ha))
    cases.append(("ot_loss", lambda: ot_loss(plan, cosine_cost(Z, Ha)), {"Z": Z, "H": Ha}))
    wo = torch.randn(4, 8, dtype=dt)
    cases.append(("sinkhorn_ot_fuse", lambda: _weighted(ot_fuse(sinkhorn(cosine_cost(Z, Ha), 0.5, 5), Ha), wo), {"Z": Z, "H": Ha}))

    ncfg = network or NetworkConfig(base_width=4, depth=2, heads=2, visual_dim=6, time_dim=8)
    sde = sde or OUVESDE()
    sm = ScoreModel(ncfg, sde).to(dt)
    F_, T_ = 4 * ncfg.multiple // 2, 2 * ncfg.multiple
    gen = torch.Generator().manual_seed(seed)
    x0 = complex_normal((F_, T_), gen)
    yh = complex_normal((F_, T_), gen)
    phi = complex_normal((F_, T_), gen)
    vv = torch.randn(3, ncfg.visual_dim, dtype=dt, generator=gen)
    t = 0.4
    sig_t = sde.std(t)
    x_t = sde.mean(x0, yh, t) + sig_t * phi
    den = Denoiser(ncfg).to(dt)
    cases.append(("denoiser_network", lambda: spectral_mse_loss(den(yh, vv), x0), dict(den.named_parameters())))
    cases.append(("score_network", lambda: score_residual_loss(sm(x_t, yh, t, vv), phi, sig_t), dict(sm.named_parameters())))
    return cases


def run_audit(seed: int = 0, network: NetworkConfig | None = None, sde: OUVESDE | None = None, max_entries: int | None = 40) -> List[Tuple[str, float]]:
    """(block name, worst relative error) for each audited block."""
    results = []
    gen = torch.Generator().manual_seed(seed)
    for name, fn, params in audit_cases(seed, network, sde):
        rep = grad_check(fn, params, max_entries=max_entries, generator=gen)
        results.append((name, rep.worst))
    return results
