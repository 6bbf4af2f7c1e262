"""Synthetic audio-visual-linguistic corpus.

Stand-ins for real recordings: harmonic "pseudo-phoneme" tones play the role
of speech, a fixed random linear map of the clean signal's energy profile plays
the role of lip embeddings, and context-mixed codebook vectors play the role of
contextual text embeddings.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ntf
from .signal import SAMPLE_RATE, read_wav, write_wav

CLS_ID = 0
SEP_ID = 1
N_PHONEMES = 40
VOCAB_SIZE = N_PHONEMES + 2
TEXT_DIM = 768
VISUAL_DIM = 64
VISUAL_FPS = 25
SEGMENT_S = 0.15
N_BANDS = 8
BAND_EDGE_HZ = 1000.0
HARMONIC_AMPS = (1.0, 0.6, 0.35)
PEAK = 0.5


def fundamental(token_id: int) -> float:
    if not 2 <= token_id < VOCAB_SIZE:
        raise ValueError(f"token id {token_id} is not a phoneme id")
    return 100.0 + 200.0 * (token_id - 2) / (N_PHONEMES - 1)


def layout_tokens(tokens: Sequence[int], duration_s: float, rng: np.random.Generator) -> np.ndarray:
    """Non-overlapping (onset, offset) seconds for each token, random gaps between them."""
    n = len(tokens)
    seg = min(SEGMENT_S, 0.9 * duration_s / n)
    gaps = rng.dirichlet(np.ones(n + 1)) * (duration_s - seg * n)
    onsets = np.cumsum(gaps[:-1]) + seg * np.arange(n)
    return np.stack([onsets, onsets + seg], axis=1)


def render_tokens(tokens: Sequence[int], duration_s: float, rng: np.random.Generator):
    if len(tokens) == 0:
        raise ValueError("token sequence is empty")
    if not 0 < duration_s:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * SAMPLE_RATE))
    times = layout_tokens(tokens, duration_s, rng)
    x = np.zeros(n)
    for tok, (on, off) in zip(tokens, times):
        a, b = int(round(on * SAMPLE_RATE)), min(int(round(off * SAMPLE_RATE)), n)
        m = b - a
        if m <= 1:
            continue
        tt = np.arange(m) / SAMPLE_RATE
        # raised-cosine ramps over the outer quarter of the segment
        ramp = max(m // 4, 1)
        env = np.ones(m)
        edge = np.sin(0.5 * np.pi * (np.arange(ramp) + 0.5) / ramp) ** 2
        env[:ramp] = edge
        env[-ramp:] = edge[::-1]
        gain = rng.uniform(0.3, 1.0)
        f0 = fundamental(int(tok))
        phases = rng.uniform(0, 2 * np.pi, len(HARMONIC_AMPS))
        seg = sum(amp * np.sin(2 * np.pi * (k + 1) * f0 * tt + ph) for k, (amp, ph) in enumerate(zip(HARMONIC_AMPS, phases)))
        x[a:b] += gain * env * seg
    peak = np.abs(x).max()
    if peak > 0:
        x *= PEAK / peak
    return x, times


def synth_clean(tokens: Sequence[int], duration_s: float, rng: np.random.Generator) -> np.ndarray:
    return render_tokens(tokens, duration_s, rng)[0]


def power(x) -> float:
    return float(np.mean(np.square(x)))


def mix_at_snr(clean, noise, snr_db: float) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError("clean and noise lengths differ")
    pc = power(clean)
    if pc == 0.0:
        raise ValueError("clean signal is silent")
    if math.isinf(snr_db) and snr_db > 0:
        return clean.copy()
    pn = power(noise)
    scale = math.sqrt(pc / (pn * 10 ** (snr_db / 10)))
    return clean + scale * noise


@dataclass
class VisualProjection:
    weight: np.ndarray
    bias: np.ndarray
    noise_std: float = 0.1
    feature_gain: float = 8.0

    @classmethod
    def random(cls, rng: np.random.Generator, dim: int = VISUAL_DIM) -> "VisualProjection":
        n_feat = N_BANDS + 1
        return cls(rng.standard_normal((dim, n_feat)) / math.sqrt(n_feat), 0.1 * rng.standard_normal(dim))


def visual_features(clean) -> np.ndarray:
    """Per 40 ms frame: RMS level and RMS in eight 125 Hz bands below 1 kHz."""
    x = np.asarray(clean, dtype=np.float64)
    hop = SAMPLE_RATE // VISUAL_FPS
    n_frames = math.ceil(len(x) / hop)
    padded = np.pad(x, (0, n_frames * hop - len(x)))
    frames = padded.reshape(n_frames, hop)
    win = np.hanning(hop)
    spec = np.abs(np.fft.rfft(frames * win, axis=1)) / math.sqrt(np.sum(win**2))
    freqs = np.fft.rfftfreq(hop, 1 / SAMPLE_RATE)
    edges = np.linspace(0, BAND_EDGE_HZ, N_BANDS + 1)
    bands = [np.sqrt(np.mean(spec[:, (freqs >= lo) & (freqs < hi)] ** 2, axis=1)) for lo, hi in zip(edges[:-1], edges[1:])]
    rms = np.sqrt(np.mean(frames**2, axis=1))
    return np.stack([rms] + bands, axis=1)


def synth_visual(clean, rng: np.random.Generator, projection: VisualProjection) -> np.ndarray:
    feats = visual_features(clean) * projection.feature_gain
    out = feats @ projection.weight.T + projection.bias
    return out + projection.noise_std * rng.standard_normal(out.shape)


def make_codebook(rng: np.random.Generator, vocab: int = VOCAB_SIZE, dim: int = TEXT_DIM) -> np.ndarray:
    c = rng.standard_normal((vocab, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def frame_tokens(tokens: Sequence[int]) -> np.ndarray:
    return np.array([CLS_ID, *tokens, SEP_ID], dtype=np.int64)


def synth_linguistic(tokens: Sequence[int], codebook: np.ndarray) -> np.ndarray:
    """(len(tokens)+2, dim) embeddings: CLS, context-mixed tokens, SEP."""
    ids = [int(t) for t in tokens]
    if not ids:
        raise ValueError("token sequence is empty")
    for t in ids:
        if not 2 <= t < codebook.shape[0]:
            raise ValueError(f"unknown token id {t}")
    rows = [codebook[CLS_ID]]
    for i, t in enumerate(ids):
        e = 0.8 * codebook[t]
        if i > 0:
            e = e + 0.1 * codebook[ids[i - 1]]
        if i + 1 < len(ids):
            e = e + 0.1 * codebook[ids[i + 1]]
        rows.append(e / np.linalg.norm(e))
    rows.append(codebook[SEP_ID])
    return np.stack(rows)


@dataclass
class UtteranceRecord:
    clean: np.ndarray
    noisy: np.ndarray
    snr_db: float
    visual: np.ndarray
    linguistic: np.ndarray
    tokens: np.ndarray
    token_times: np.ndarray
    seed: int


@dataclass
class CorpusConfig:
    min_duration: float = 1.0
    max_duration: float = 2.0
    visual_dim: int = VISUAL_DIM
    text_dim: int = TEXT_DIM


class Corpus:
    """Corpus-level fixed tables (codebook, visual map) plus per-record synthesis."""

    def __init__(self, seed: int, config: CorpusConfig = CorpusConfig()):
        self.seed = seed
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self.codebook = make_codebook(rng, dim=config.text_dim)
        self.projection = VisualProjection.random(rng, config.visual_dim)

    def record_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, 1, index]).generate_state(1)[0])

    def make_record(self, index: int, snr_db: float, noise: Optional[np.ndarray] = None) -> UtteranceRecord:
        rs = self.record_seed(index)
        rng = np.random.default_rng(rs)
        dur = rng.uniform(self.config.min_duration, self.config.max_duration)
        n_tok = int(np.clip(rng.integers(max(1, int(dur / 0.3)), int(dur / 0.2) + 1), 1, 32))
        tokens = rng.integers(2, VOCAB_SIZE, n_tok)
        clean, times = render_tokens(tokens, dur, rng)
        if noise is None:
            noise = rng.standard_normal(len(clean))
        else:
            noise = np.resize(np.asarray(noise, dtype=np.float64), len(clean))
        noisy = mix_at_snr(clean, noise, snr_db)
        visual = synth_visual(clean, rng, self.projection)
        ling = synth_linguistic(tokens, self.codebook)
        return UtteranceRecord(clean, noisy, snr_db, visual, ling, frame_tokens(tokens), times, rs)


def assign_splits(n: int, rng: np.random.Generator) -> List[str]:
    n_test = int(round(0.1 * n))
    n_val = int(round(0.1 * n))
    order = rng.permutation(n)
    splits = ["train"] * n
    for i in order[:n_val]:
        splits[i] = "validation"
    for i in order[n_val : n_val + n_test]:
        splits[i] = "test"
    return splits


def build_corpus(n_utterances: int, snr_list: Sequence[float], seed: int, out_dir, config: CorpusConfig = CorpusConfig()) -> Path:
    if n_utterances < 1:
        raise ValueError("need at least one utterance")
    if not snr_list:
        raise ValueError("snr_list is empty")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create corpus directory {out}: {err}") from err
    corpus = Corpus(seed, config)
    splits = assign_splits(n_utterances, np.random.default_rng(np.random.SeedSequence([seed, 2])))
    records = []
    for i in range(n_utterances):
        snr = float(snr_list[i % len(snr_list)])
        rec = corpus.make_record(i, snr)
        name = f"rec_{i:04d}"
        d = out / name
        d.mkdir(exist_ok=True)
        write_wav(d / "clean.wav", rec.clean)
        write_wav(d / "noisy.wav", rec.noisy)
        ntf.save(d / "embeddings.ntf", {
            "visual": rec.visual,
            "linguistic": rec.linguistic,
            "token_ids": rec.tokens,
            "token_times": rec.token_times,
        })
        records.append({
            "id": name,
            "seed": rec.seed,
            "snr_db": snr,
            "split": splits[i],
            "duration_s": len(rec.clean) / SAMPLE_RATE,
            "clean": f"{name}/clean.wav",
            "noisy": f"{name}/noisy.wav",
            "embeddings": f"{name}/embeddings.ntf",
        })
    manifest = {
        "version": 1,
        "seed": seed,
        "sample_rate": SAMPLE_RATE,
        "snr_list": [float(s) for s in snr_list],
        "config": asdict(config),
        "records": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


@dataclass
class LoadedRecord:
    id: str
    clean: np.ndarray
    noisy: np.ndarray
    visual: np.ndarray
    linguistic: np.ndarray
    token_ids: np.ndarray
    token_times: np.ndarray
    snr_db: float


def load_record(data_dir, entry: dict) -> LoadedRecord:
    root = Path(data_dir)
    clean, sr1 = read_wav(root / entry["clean"])
    noisy, sr2 = read_wav(root / entry["noisy"])
    if sr1 != SAMPLE_RATE or sr2 != SAMPLE_RATE:
        raise ValueError(f"{entry['id']}: unexpected sample rate")
    emb = ntf.load(root / entry["embeddings"])
    return LoadedRecord(
        entry["id"], clean, noisy,
        emb["visual"].astype(np.float64), emb["linguistic"].astype(np.float64),
        emb["token_ids"].astype(np.int64), emb["token_times"].astype(np.float64),
        float(entry["snr_db"]),
    )


def split_entries(manifest: dict, split: str) -> List[dict]:
    entries = [r for r in manifest["records"] if r["split"] == split]
    if not entries:
        raise ValueError(f"split {split!r} is empty or missing")
    return entries
