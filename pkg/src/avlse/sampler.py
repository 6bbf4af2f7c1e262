"""Reverse-diffusion sampling: Euler-Maruyama predictor plus annealed Langevin corrector."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .model import pad_frames
from .sde import OUVESDE, complex_normal
from . import signal as sig

log = logging.getLogger(__name__)

ScoreFn = Callable[[torch.Tensor, float], torch.Tensor]


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    steps: int = 30
    corrector_steps: int = 1
    snr: float = 0.5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.snr <= 0:
            raise ValueError("corrector snr must be positive")


def _noise_like(x, generator):
    return complex_normal(x.shape, generator, dtype=x.real.dtype)


def predictor_step(x, t: float, dt: float, score_fn: ScoreFn, y_hat, sde: OUVESDE, generator=None, step_index: int = -1):
    """One reverse-time Euler-Maruyama step from t to t - dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = score_fn(x, t)
    if not torch.isfinite(torch.view_as_real(s)).all():
        raise SamplingError(f"non-finite score at step {step_index}, t={t:.4f}")
    g = sde.diffusion_coeff(t)
    x_mean = x + (-sde.drift(x, y_hat) + g**2 * s) * dt
    return x_mean + g * math.sqrt(dt) * _noise_like(x, generator)


def corrector_step(x, t: float, score_fn: ScoreFn, snr: float = 0.5, generator=None):
    """Annealed Langevin step with eps = 2 (snr * |phi| / |s|)^2."""
    s = score_fn(x, t)
    phi = _noise_like(x, generator)
    s_norm = torch.linalg.vector_norm(s).item()
    if s_norm == 0.0:
        log.info("zero score at t=%.4f; corrector skipped", t)
        return x
    eps = 2.0 * (snr * torch.linalg.vector_norm(phi).item() / s_norm) ** 2
    return x + eps * s + math.sqrt(2.0 * eps) * phi


def time_grid(sde: OUVESDE, steps: int) -> np.ndarray:
    return np.linspace(sde.T, sde.config.t_min, steps + 1)


def pc_sample(y_hat, score_fn: ScoreFn, sde: OUVESDE, cfg: SamplerConfig = SamplerConfig(), generator=None):
    """Start from the prior around ``y_hat`` and integrate down to t_min."""
    x = sde.sample_prior(y_hat, generator)
    ts = time_grid(sde, cfg.steps)
    for i in range(cfg.steps):
        t = float(ts[i])
        dt = float(ts[i] - ts[i + 1])
        for _ in range(cfg.corrector_steps):
            x = corrector_step(x, t, score_fn, cfg.snr, generator)
        x = predictor_step(x, t, dt, score_fn, y_hat, sde, generator, step_index=i)
        if not torch.isfinite(torch.view_as_real(x)).all():
            finite = torch.view_as_real(x)[torch.isfinite(torch.view_as_real(x))]
            peak = finite.abs().max().item() if finite.numel() else float("nan")
            raise SamplingError(f"non-finite state after step {i} (t={t:.4f}, max finite magnitude {peak:.3g})")
    return x


@torch.no_grad()
def enhance_spectrogram(noisy_spec, v, denoiser, score_model, sde: OUVESDE, cfg: SamplerConfig, generator=None, v_seconds=None):
    """Denoise then sample, for a complex (F, T) spectrogram already in model units."""
    multiple = denoiser.cfg.multiple
    T = noisy_spec.shape[-1]
    y = pad_frames(noisy_spec, multiple)
    y_hat = denoiser(y, v, v_seconds)
    score_fn = lambda x, t: score_model(x, y_hat, t, v, v_seconds)  # noqa: E731
    x = pc_sample(y_hat, score_fn, sde, cfg, generator)
    return x[..., :T], y_hat[..., :T]


def enhance(noisy, v, models, cfg: SamplerConfig = SamplerConfig(), seed: int = 0, sample_rate: int = sig.SAMPLE_RATE):
    """Waveform in, waveform out. ``models`` is an :class:`avlse.trainer.InferenceModels`."""
    if sample_rate != sig.SAMPLE_RATE:
        raise ValueError(f"expected {sig.SAMPLE_RATE} Hz input, got {sample_rate}")
    noisy = np.asarray(noisy, dtype=np.float64)
    gen = torch.Generator().manual_seed(seed)
    spec = models.to_model_units(sig.stft(noisy, models.stft))
    v_t = None if v is None else torch.as_tensor(np.asarray(v), dtype=models.real_dtype)
    x, _ = enhance_spectrogram(spec, v_t, models.denoiser, models.score, models.sde, cfg, gen)
    return sig.istft(models.from_model_units(x), models.stft, len(noisy))
