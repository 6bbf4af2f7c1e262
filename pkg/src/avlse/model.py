"""U-shaped networks for the predictive denoiser and the score model.

Both networks share one architecture: a convolutional encoder/decoder whose
every level ends in a cross-attention block that lets audio feature tokens
query the visual embedding sequence. Audio queries and visual keys both carry
a sinusoidal encoding of absolute time (seconds), which is what allows the
attention to line up lip frames with spectrogram frames.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch
from torch import nn
import torch.nn.functional as F

from .sde import OUVESDE
from .signal import SAMPLE_RATE, pack_channels, unpack_channels

VISUAL_FPS = 25.0


@dataclass
class NetworkConfig:
    in_channels: int = 2
    base_width: int = 16
    depth: int = 3
    heads: int = 4
    visual_dim: int = 64
    time_dim: int = 32
    use_visual: bool = True
    hop: int = 128
    # score model only: add the score of N(y_hat, sigma(t)^2) so the network learns the departure from it
    prior_skip: bool = True

    def __post_init__(self):
        if self.base_width <= 0 or self.depth < 1 or self.heads < 1:
            raise ValueError("widths, depth and heads must be positive")
        if self.base_width % self.heads:
            raise ValueError("base_width must be divisible by heads")

    @property
    def multiple(self) -> int:
        return 2**self.depth

    def to_dict(self):
        return asdict(self)


def sinusoidal(x: torch.Tensor, dim: int, min_freq: float, max_freq: float) -> torch.Tensor:
    """Map scalars ``x`` (any shape) to ``dim`` sin/cos features with geometric frequencies."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(math.log(min_freq), math.log(max_freq), half, dtype=x.dtype))
    ang = 2 * math.pi * x[..., None] * freqs
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


def time_encoding(seconds: torch.Tensor, dim: int) -> torch.Tensor:
    return sinusoidal(seconds, dim, 0.25, 12.5)


def _groups(ch: int) -> int:
    return 4 if ch % 4 == 0 else 1


class ResBlock(nn.Module):
    """Two 3x3 convolutions; the time embedding modulates the second norm (scale and shift)."""

    def __init__(self, ch_in: int, ch_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, 2 * ch_out)
        self.norm2 = nn.GroupNorm(_groups(ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        # an additive bias alone would be cancelled by a per-channel group norm
        scale, shift = self.temb(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Audio tokens attend to visual tokens; output is added to the audio features."""

    def __init__(self, channels: int, visual_dim: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(visual_dim, channels, bias=False)
        self.to_v = nn.Linear(visual_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def attend(self, h_tokens, v_tokens, q_pos=None, k_pos=None):
        """softmax(QK^T/sqrt(d))V per head, concatenated; (B, N, C)."""
        if v_tokens.shape[1] == 0:
            raise ValueError("visual sequence is empty")
        B, N, C = h_tokens.shape
        M = v_tokens.shape[1]
        H = self.heads
        qi = h_tokens if q_pos is None else h_tokens + q_pos
        ki = v_tokens if k_pos is None else v_tokens + k_pos
        q = self.to_q(qi).reshape(B, N, H, C // H).transpose(1, 2)
        k = self.to_k(ki).reshape(B, M, H, C // H).transpose(1, 2)
        v = self.to_v(v_tokens).reshape(B, M, H, C // H).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return out.transpose(1, 2).reshape(B, N, C)

    def forward(self, h, v, frame_seconds, v_seconds):
        B, C, Fr, T = h.shape
        tokens = self.norm(h).permute(0, 2, 3, 1).reshape(B, Fr * T, C)
        q_pos = time_encoding(frame_seconds, C)[None, None].expand(B, Fr, T, C).reshape(B, Fr * T, C)
        k_pos = time_encoding(v_seconds, v.shape[-1])
        out = self.to_out(self.attend(tokens, v, q_pos, k_pos))
        return h + out.reshape(B, Fr, T, C).permute(0, 3, 1, 2)


class UNet(nn.Module):
    def __init__(self, cfg: NetworkConfig, extra_channels: int = 0):
        super().__init__()
        self.cfg = cfg
        C = cfg.base_width
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, 2 * td), nn.SiLU(), nn.Linear(2 * td, td))
        self.in_conv = nn.Conv2d(cfg.in_channels + extra_channels, C, 3, padding=1)
        self.enc = nn.ModuleList(ResBlock(C, C, td) for _ in range(cfg.depth))
        self.down = nn.ModuleList(nn.Conv2d(C, C, 3, stride=2, padding=1) for _ in range(cfg.depth))
        self.mid = ResBlock(C, C, td)
        self.dec = nn.ModuleList(ResBlock(2 * C, C, td) for _ in range(cfg.depth))
        self.up = nn.ModuleList(nn.Conv2d(C, C, 3, padding=1) for _ in range(cfg.depth))
        if cfg.use_visual:
            mk = lambda: CrossAttention(C, cfg.visual_dim, cfg.heads)  # noqa: E731
            self.enc_attn = nn.ModuleList(mk() for _ in range(cfg.depth))
            self.mid_attn = mk()
            self.dec_attn = nn.ModuleList(mk() for _ in range(cfg.depth))
        self.out_norm = nn.GroupNorm(_groups(C), C)
        self.out_conv = nn.Conv2d(C, cfg.in_channels, 1)
        # bottleneck tokens (B, T_a, d_a) recorded on each forward, before the hook
        self.bottleneck: Optional[torch.Tensor] = None
        self.bottleneck_hook: Optional[Callable[[torch.Tensor], torch.Tensor]] = None

    def _attn(self, block, h, v, v_sec, level):
        if not self.cfg.use_visual:
            return h
        T = h.shape[-1]
        step = self.cfg.hop * 2**level / SAMPLE_RATE
        frame_sec = torch.arange(T, dtype=h.dtype) * step
        return block(h, v, frame_sec, v_sec)

    def forward(self, x, t, v=None, v_seconds=None):
        cfg = self.cfg
        B, _, Fr, T = x.shape
        if Fr % cfg.multiple or T % cfg.multiple:
            raise ValueError(f"spatial extent {(Fr, T)} not divisible by {cfg.multiple}")
        if cfg.use_visual:
            if v is None:
                raise ValueError("visual embeddings required by this network")
            if v.dim() == 2:
                v = v[None]
            if v.shape[1] == 0:
                raise ValueError("visual sequence is empty")
            if v_seconds is None:
                v_seconds = default_visual_seconds(v.shape[1], x.dtype)
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(B)
        temb = self.time_mlp(sinusoidal(t, cfg.time_dim, 1.0, 100.0))

        h = self.in_conv(x)
        skips = []
        for lvl in range(cfg.depth):
            h = self.enc[lvl](h, temb)
            if cfg.use_visual:
                h = self._attn(self.enc_attn[lvl], h, v, v_seconds, lvl)
            skips.append(h)
            h = self.down[lvl](h)
        h = self.mid(h, temb)
        if cfg.use_visual:
            h = self._attn(self.mid_attn, h, v, v_seconds, cfg.depth)

        Bh, C, Fb, Tb = h.shape
        tokens = h.permute(0, 2, 3, 1).reshape(Bh, Fb * Tb, C)
        self.bottleneck = tokens
        if self.bottleneck_hook is not None:
            tokens = self.bottleneck_hook(tokens)
            h = tokens.reshape(Bh, Fb, Tb, C).permute(0, 3, 1, 2)

        for i, lvl in enumerate(reversed(range(cfg.depth))):
            h = F.interpolate(h, scale_factor=2.0, mode="nearest")
            h = self.up[i](h)
            h = self.dec[i](torch.cat([h, skips[lvl]], dim=1), temb)
            if cfg.use_visual:
                h = self._attn(self.dec_attn[i], h, v, v_seconds, lvl)
        return self.out_conv(F.silu(self.out_norm(h)))

    def bottleneck_tap(self) -> torch.Tensor:
        if self.bottleneck is None:
            raise RuntimeError("bottleneck tapped before any forward pass")
        return self.bottleneck


def default_visual_seconds(n: int, dtype=torch.float64) -> torch.Tensor:
    return (torch.arange(n, dtype=dtype) + 0.5) / VISUAL_FPS


def pad_frames(spec: torch.Tensor, multiple: int) -> torch.Tensor:
    T = spec.shape[-1]
    extra = (-T) % multiple
    return F.pad(spec, (0, extra)) if extra else spec


class Denoiser(nn.Module):
    """Predictive network: noisy spectrogram (+ visual) -> preliminary estimate, time fixed at 1."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.net = UNet(cfg)

    def forward(self, y: torch.Tensor, v=None, v_seconds=None) -> torch.Tensor:
        batched = y.dim() == 3
        yb = y if batched else y[None]
        x = pack_channels(yb).to(self.net.in_conv.weight.dtype)
        out = unpack_channels(self.net(x, 1.0, v, v_seconds))
        return out if batched else out[0]


class ScoreModel(nn.Module):
    """s_theta(x_t, y_hat, v, t) = net([x_t, y_hat], t, v) / sigma(t) - (x_t - y_hat) / sigma(t)^2.

    The second term (switched by ``cfg.prior_skip``) is the exact score when
    x0 equals y_hat, so an untrained network already reproduces the
    preliminary estimate and training only has to learn the correction.
    """

    def __init__(self, cfg: NetworkConfig, sde: OUVESDE):
        super().__init__()
        self.cfg = cfg
        self.sde = sde
        self.net = UNet(cfg, extra_channels=2)

    def forward(self, x_t, y_hat, t, v=None, v_seconds=None) -> torch.Tensor:
        if x_t.shape != y_hat.shape:
            raise ValueError("x_t and y_hat must share a shape")
        if t < self.sde.config.t_min - 1e-12 or t > self.sde.T + 1e-12:
            raise ValueError(f"t={t} outside [t_min, T]")
        batched = x_t.dim() == 3
        xb, yb = (x_t, y_hat) if batched else (x_t[None], y_hat[None])
        dtype = self.net.in_conv.weight.dtype
        inp = torch.cat([pack_channels(xb), pack_channels(yb)], dim=1).to(dtype)
        sigma = self.sde.std(float(t))
        out = unpack_channels(self.net(inp, t, v, v_seconds)) / sigma
        if self.cfg.prior_skip:
            out = out - (xb - yb).to(out.dtype) / sigma**2
        return out if batched else out[0]
