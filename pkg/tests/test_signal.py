import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avlse import signal as sig

CFG = sig.StftConfig()


def test_config_bins():
    assert CFG.n_bins == 256


def test_periodic_hann_endpoints():
    w = sig.periodic_hann(510)
    assert w[0] == 0.0
    assert w[255] == pytest.approx(1.0)
    assert w[-1] > 0


def test_zero_waveform_gives_zero_spectrogram():
    s = sig.stft(np.zeros(16000), CFG)
    assert s.shape == (256, 126)
    assert not np.any(s)


def test_frame_count():
    assert sig.n_frames(16000, CFG) == 126


def test_sinusoid_energy_concentrates_at_its_bin():
    n = np.arange(16000)
    f = 31 * sig.SAMPLE_RATE / CFG.fft_length
    s = sig.stft(np.sin(2 * np.pi * f * n / sig.SAMPLE_RATE), CFG)
    e = np.abs(s) ** 2
    assert e[30:33].sum() / e.sum() >= 0.95


def test_round_trip_random_waveform(rng):
    w = rng.standard_normal(32000) * 0.3
    back = sig.istft(sig.stft(w, CFG), CFG, len(w))
    assert np.max(np.abs(back - w)) < 1e-6
    assert abs(np.sum(back**2) / np.sum(w**2) - 1) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=300, max_value=5000), st.integers(min_value=0, max_value=2**31 - 1))
def test_round_trip_any_length(n, seed):
    w = np.random.default_rng(seed).uniform(-1, 1, n)
    back = sig.istft(sig.stft(w, CFG), CFG, n)
    assert np.max(np.abs(back - w)) < 1e-6


def test_zero_spectrogram_gives_zero_waveform():
    assert not np.any(sig.istft(np.zeros((256, 20), complex), CFG, 2000))


def test_istft_rejects_length_beyond_frames():
    s = np.zeros((256, 10), complex)
    with pytest.raises(ValueError):
        sig.istft(s, CFG, sig.max_reconstructable_length(10, CFG) + 1)


def test_crop_first_frames():
    s = np.arange(300)[None, :] * np.ones((4, 1))
    out = sig.crop_or_pad(s, 256, 0)
    assert out.shape == (4, 256)
    assert np.array_equal(out[0], np.arange(256))


def test_crop_pads_short_input():
    s = np.ones((4, 100), complex)
    out = sig.crop_or_pad(s, 256, 0)
    assert np.all(out[:, :100] == 1) and not np.any(out[:, 100:])


def test_crop_with_offset():
    s = np.arange(300)[None, :]
    out = sig.crop_or_pad(s, 256, 44)
    assert np.array_equal(out[0], np.arange(44, 300))


def test_crop_rejects_negative_offset():
    with pytest.raises(ValueError):
        sig.crop_or_pad(np.ones((2, 10)), 5, -1)


def test_crop_torch_tensor():
    s = torch.arange(10, dtype=torch.float64)[None]
    out = sig.crop_or_pad(s, 4, 3)
    assert torch.equal(out[0], torch.tensor([3.0, 4, 5, 6], dtype=torch.float64))


def test_pack_unpack_identity(rng):
    s = torch.from_numpy(rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5)))
    assert torch.equal(sig.unpack_channels(sig.pack_channels(s)), s)


def test_pack_real_spectrogram_has_zero_imaginary_channel():
    s = torch.ones(3, 5, dtype=torch.complex128)
    assert not torch.any(sig.pack_channels(s)[1])


def test_pack_channel_layout():
    s = torch.zeros(3, 5, dtype=torch.complex128)
    s[1, 2] = 1 + 2j
    p = sig.pack_channels(s)
    assert p[0, 1, 2] == 1 and p[1, 1, 2] == 2


def test_wav_round_trip(tmp_path, rng):
    w = np.clip(rng.standard_normal(1600) * 0.2, -0.99, 0.99)
    sig.write_wav(tmp_path / "a.wav", w)
    back, sr = sig.read_wav(tmp_path / "a.wav")
    assert sr == 16000
    assert np.max(np.abs(back - w)) <= 1 / 32767
