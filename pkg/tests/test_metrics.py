import numpy as np
import pytest

from avlse.metrics import MetricReport, UtteranceMetrics, evaluate_pairs, si_sdr, spectral_mse
from avlse import signal as sig


def test_si_sdr_identity_and_scale_capped(rng):
    x = rng.standard_normal(4000)
    assert si_sdr(x, x) == 100.0
    assert si_sdr(x, 2 * x) == 100.0


def test_si_sdr_orthogonal_noise_equal_energy(rng):
    x = rng.standard_normal(4000)
    n = rng.standard_normal(4000)
    n -= x * (n @ x) / (x @ x)
    n *= np.linalg.norm(x) / np.linalg.norm(n)
    assert si_sdr(x, x + n) == pytest.approx(0.0, abs=1e-9)


def test_si_sdr_errors(rng):
    with pytest.raises(ValueError):
        si_sdr(np.zeros(10), rng.standard_normal(10))
    with pytest.raises(ValueError):
        si_sdr(rng.standard_normal(10), rng.standard_normal(11))


def test_spectral_mse_properties(rng):
    a, b = rng.standard_normal(4000), rng.standard_normal(4000)
    assert spectral_mse(a, a) == 0.0
    assert spectral_mse(a, b) == pytest.approx(spectral_mse(b, a), rel=1e-15)
    s = sig.stft(a)
    ms = np.mean(np.concatenate([s.real.ravel() ** 2, s.imag.ravel() ** 2]))
    assert spectral_mse(a, -a) == pytest.approx(4 * ms, rel=1e-12)


def test_clean_as_estimate_report(rng):
    clean = [rng.standard_normal(3000) for _ in range(3)]
    rep = evaluate_pairs((f"u{i}", c, c + 0.1 * rng.standard_normal(3000), c) for i, c in enumerate(clean))
    assert rep.mean_si_sdr == 100.0


def test_noisy_as_estimate_at_zero_db(rng):
    rows = []
    for i in range(20):
        c = rng.standard_normal(16000)
        noise = rng.standard_normal(16000)
        noisy = c + noise * np.sqrt(np.mean(c**2) / np.mean(noise**2))
        rows.append((str(i), c, noisy, noisy))
    rep = evaluate_pairs(rows)
    assert abs(rep.mean_si_sdr) < 0.5


def test_report_csv(tmp_path):
    rep = MetricReport("A+V", "x.ckpt", [UtteranceMetrics("a", 1.0, 0.0, 0.5), UtteranceMetrics("b", 3.0, 1.0, 1.5)])
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("id,variant,checkpoint,si_sdr_db")
    assert lines[-2].startswith("mean,A+V,x.ckpt,2.000000,0.500000,1")
    assert lines[-1].startswith("std,A+V,x.ckpt,1.000000,0.500000,0.5")
