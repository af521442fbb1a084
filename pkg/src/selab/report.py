"""Figure rendering for the report paths (eval, analyze, spectrogram export).

Figures are written next to the delimited output; data files remain the
primary interface and rendering can be disabled from the CLI.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import LagStats  # noqa: E402
from .metrics import EvalReport  # noqa: E402


def render_eval_figure(report: EvalReport, path: Path):
    ids = [r.utt_id for r in report.rows]
    sisdr = [r.sisdr_db for r in report.rows]
    stoi = [r.stoi for r in report.rows]
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 0.5 * len(ids) + 3), 3.2))
    x = np.arange(len(ids))
    axes[0].bar(x, sisdr, color="#3b6ea5")
    axes[0].set_title("SI-SDR (dB)")
    axes[1].bar(x, stoi, color="#6aa56b")
    axes[1].set_title("STOI")
    axes[1].set_ylim(0, 1.05)
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=90, fontsize=6)
    agg = report.aggregates()
    fig.suptitle(f"mean SI-SDR {agg['mean_sisdr']:.2f} dB, mean STOI {agg['mean_stoi']:.3f}",
                 fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_lag_figure(stats: list[LagStats], path: Path):
    """Box plot from precomputed quartiles/whiskers, one box per lag."""
    boxes = [{
        "label": f"{s.lag_ms:g}ms",
        "med": s.median, "q1": s.q1, "q3": s.q3,
        "whislo": s.whisker_lo, "whishi": s.whisker_hi,
        "fliers": [],
    } for s in stats]
    fig, ax = plt.subplots(figsize=(1.2 * len(boxes) + 2, 3.2))
    ax.bxp(boxes, showfliers=False)
    metric = stats[0].metric if stats else ""
    ax.set_ylabel(metric)
    ax.set_xlabel("frame lag")
    if metric == "correlation":
        ax.set_ylim(-1.05, 1.05)
        ax.axhline(0.0, color="gray", lw=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_spectrogram_figure(mat: np.ndarray, path: Path, hop_s: float = 0.02):
    fig, ax = plt.subplots(figsize=(6, 3))
    im = ax.imshow(mat.T, origin="lower", aspect="auto", cmap="magma",
                   extent=[0, mat.shape[0] * hop_s, 0, mat.shape[1]])
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency bin")
    fig.colorbar(im, ax=ax, label="dB")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
