"""Figures written next to the CSV outputs of the CLI."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sde_table(rows, path):
    t, g, decay, std = (np.array(c) for c in zip(*rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(t, g, label="g(t)")
        ax.plot(t, decay, label="exp(-eta t)")
        ax.plot(t, std, label="sigma(t)")
        ax.set_xlabel("t")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_training_log(rows, path, title=""):
    if not rows:
        return
    steps = np.array([r["step"] for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key in ("total", "loss_denoiser", "loss_score", "loss_align", "loss_opt"):
            vals = np.array([r[key] for r in rows], dtype=float)
            if not np.any(vals):
                continue
            k = min(25, len(vals))
            smooth = np.convolve(vals, np.ones(k) / k, mode="valid")
            ax.plot(steps[k - 1 :], smooth, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=7)
        _save(fig, path)


def plot_metric_report(report, path):
    if not report.rows:
        return
    noisy = np.array([r.si_sdr_noisy for r in report.rows])
    enh = np.array([r.si_sdr for r in report.rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(noisy, enh, s=12)
        lo, hi = min(noisy.min(), enh.min()), max(noisy.max(), enh.max())
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel("noisy SI-SDR (dB)")
        ax.set_ylabel("enhanced SI-SDR (dB)")
        ax.set_title(f"{report.variant}: mean {enh.mean():.2f} dB vs {noisy.mean():.2f} dB")
        _save(fig, path)
