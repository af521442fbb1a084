"""Embedding-structure study: frame correlation/distance versus lag.

For a frames x dim sequence, every valid frame pair (t, t + lag) yields one
sample: the Pearson correlation across the feature dimension, or the L2
distance (raw and normalized by the mean frame norm). Box statistics use
quartiles with 1.5*IQR whiskers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import StftConfig, Waveform, stft

VAR_FLOOR = 1e-12
HOP_MS = 20.0


class AnalysisError(ValueError):
    pass


@dataclass
class LagStats:
    lag_ms: float
    metric: str
    q1: float
    median: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    count: int
    skipped: int = 0

    @classmethod
    def from_samples(cls, samples: np.ndarray, lag_ms: float, metric: str,
                     skipped: int = 0) -> "LagStats":
        q1, med, q3 = (float(q) for q in np.percentile(samples, [25, 50, 75]))
        iqr = q3 - q1
        lo_bound, hi_bound = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        inside = samples[(samples >= lo_bound) & (samples <= hi_bound)]
        return cls(lag_ms=lag_ms, metric=metric, q1=q1, median=med, q3=q3,
                   whisker_lo=float(np.min(inside)), whisker_hi=float(np.max(inside)),
                   count=int(samples.size), skipped=skipped)


def _lag_frames(e: np.ndarray, lag_ms: float, hop_ms: float) -> int:
    if lag_ms <= 0 or abs(lag_ms / hop_ms - round(lag_ms / hop_ms)) > 1e-9:
        raise AnalysisError(f"lag {lag_ms} ms is not a positive multiple of the {hop_ms} ms hop")
    lag = int(round(lag_ms / hop_ms))
    if lag >= e.shape[0]:
        raise AnalysisError(f"lag of {lag} frames >= sequence length {e.shape[0]}")
    return lag


def lag_correlation(e: np.ndarray, lag_ms: float,
                    hop_ms: float = HOP_MS) -> tuple[np.ndarray, LagStats]:
    """Pearson correlation across the feature dim for frames lag_ms apart.

    Frame pairs where either frame has near-zero variance are skipped and
    counted in the returned stats.
    """
    e = np.asarray(e, dtype=np.float64)
    lag = _lag_frames(e, lag_ms, hop_ms)
    a = e[:-lag]
    b = e[lag:]
    a0 = a - a.mean(axis=1, keepdims=True)
    b0 = b - b.mean(axis=1, keepdims=True)
    va = np.sum(a0 * a0, axis=1)
    vb = np.sum(b0 * b0, axis=1)
    ok = (va > VAR_FLOOR) & (vb > VAR_FLOOR)
    skipped = int(np.sum(~ok))
    if not np.any(ok):
        raise AnalysisError("all frame pairs had near-zero variance")
    samples = np.sum(a0[ok] * b0[ok], axis=1) / np.sqrt(va[ok] * vb[ok])
    samples = np.clip(samples, -1.0, 1.0)
    return samples, LagStats.from_samples(samples, lag_ms, "correlation", skipped)


def lag_euclidean(e: np.ndarray, lag_ms: float, hop_ms: float = HOP_MS,
                  normalized: bool = False) -> tuple[np.ndarray, LagStats]:
    """L2 distance between frames lag_ms apart; optionally divided by the
    mean frame norm of the sequence."""
    e = np.asarray(e, dtype=np.float64)
    lag = _lag_frames(e, lag_ms, hop_ms)
    d = e[lag:] - e[:-lag]
    samples = np.sqrt(np.sum(d * d, axis=1))
    metric = "euclidean"
    if normalized:
        mean_norm = float(np.mean(np.sqrt(np.sum(e * e, axis=1))))
        samples = samples / (mean_norm + 1e-12)
        metric = "euclidean_norm"
    return samples, LagStats.from_samples(samples, lag_ms, metric)


def export_spectrogram(w: Waveform, path, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Write the log-magnitude grid 20*log10(|stft| + 1e-8) as CSV text."""
    s = stft(w, cfg)
    mat = 20.0 * np.log10(s.magnitude() + 1e-8)
    np.savetxt(path, mat, fmt="%.6f", delimiter=",")
    return mat


def stats_tsv(stats: list[LagStats]) -> str:
    header = "lag_ms\tmetric\tq1\tmedian\tq3\twhisker_lo\twhisker_hi\tcount\tskipped"
    lines = [header]
    for s in stats:
        lines.append(f"{s.lag_ms:g}\t{s.metric}\t{s.q1:.6f}\t{s.median:.6f}\t{s.q3:.6f}"
                     f"\t{s.whisker_lo:.6f}\t{s.whisker_hi:.6f}\t{s.count}\t{s.skipped}")
    return "\n".join(lines) + "\n"
