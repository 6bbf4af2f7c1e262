"""STFT front end, channel packing and 16-bit PCM WAV I/O."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 510
    hop: int = 128
    fft_length: int = 510
    frames_per_crop: int = 256

    def __post_init__(self):
        if not 0 < self.hop <= self.window_length:
            raise ValueError(f"hop must be in (0, window_length], got {self.hop}")
        if self.fft_length < self.window_length:
            raise ValueError("fft_length must be at least window_length")

    @property
    def n_bins(self) -> int:
        return self.fft_length // 2 + 1


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _window(cfg: StftConfig) -> np.ndarray:
    w = periodic_hann(cfg.window_length)
    if cfg.fft_length > cfg.window_length:
        left = (cfg.fft_length - cfg.window_length) // 2
        w = np.pad(w, (left, cfg.fft_length - cfg.window_length - left))
    return w


def n_frames(n_samples: int, cfg: StftConfig = StftConfig()) -> int:
    return n_samples // cfg.hop + 1


def stft(w, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Centred one-sided STFT. Returns a complex (F, T) array."""
    x = np.asarray(w, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("stft expects a non-empty 1-D waveform")
    pad = cfg.fft_length // 2
    x = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")
    T = n_frames(len(w), cfg)
    idx = np.arange(cfg.fft_length)[None, :] + cfg.hop * np.arange(T)[:, None]
    frames = x[idx] * _window(cfg)
    return np.fft.rfft(frames, axis=1).T


def max_reconstructable_length(T: int, cfg: StftConfig = StftConfig()) -> int:
    return (T - 1) * cfg.hop + cfg.fft_length // 2


def istft(s, cfg: StftConfig = StftConfig(), out_length: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft` by window-square-normalised overlap-add."""
    S = np.asarray(s)
    if S.ndim != 2 or S.shape[0] != cfg.n_bins:
        raise ValueError(f"expected a ({cfg.n_bins}, T) spectrogram, got {S.shape}")
    T = S.shape[1]
    limit = max_reconstructable_length(T, cfg)
    if out_length is None:
        out_length = (T - 1) * cfg.hop
    if out_length > limit:
        raise ValueError(f"out_length {out_length} exceeds reconstructable extent {limit}")
    win = _window(cfg)
    frames = np.fft.irfft(S.T, n=cfg.fft_length, axis=1) * win
    total = cfg.fft_length + cfg.hop * (T - 1)
    y = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(T):
        sl = slice(i * cfg.hop, i * cfg.hop + cfg.fft_length)
        y[sl] += frames[i]
        wsum[sl] += win**2
    pad = cfg.fft_length // 2
    y = y[pad : pad + out_length]
    wsum = wsum[pad : pad + out_length]
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    return y


def crop_or_pad(s, T: int = 256, offset: int = 0):
    """Take ``T`` frames starting at ``offset``; zero-pad on the right when short."""
    if offset < 0:
        raise ValueError("offset must be non-negative")
    n = s.shape[-1]
    if offset > max(n - 1, 0):
        raise ValueError(f"offset {offset} beyond {n} frames")
    part = s[..., offset : offset + T]
    short = T - part.shape[-1]
    if short == 0:
        return part
    if isinstance(part, torch.Tensor):
        return torch.nn.functional.pad(part, (0, short))
    return np.pad(part, [(0, 0)] * (part.ndim - 1) + [(0, short)])


def pack_channels(s):
    """Complex (..., F, T) -> real (..., 2, F, T) with channels (real, imag)."""
    if isinstance(s, torch.Tensor):
        if not s.is_complex():
            s = s.to(torch.complex128)
        return torch.stack([s.real, s.imag], dim=-3)
    s = np.asarray(s)
    return np.stack([s.real, s.imag], axis=-3)


def unpack_channels(t):
    if t.shape[-3] != 2:
        raise ValueError(f"channel axis must have extent 2, got {t.shape[-3]}")
    if isinstance(t, torch.Tensor):
        return torch.complex(t[..., 0, :, :], t[..., 1, :, :])
    t = np.asarray(t)
    return t[..., 0, :, :] + 1j * t[..., 1, :, :]


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2 or f.getnchannels() != 1:
            raise ValueError(f"{path}: only mono 16-bit PCM is supported")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767 / 32768)
    pcm = np.round(x * 32768.0).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())
