"""Evaluation metrics: SI-SDR (gradient-free path) and STOI.

STOI follows the published short-time objective intelligibility procedure
(Taal et al.) on a resample-free 16 kHz path: 384-sample frames with a
240-sample hop, 15 one-third-octave bands with centers 150 Hz * 2^(k/3)
(k = 0..14, topping out near 4.3 kHz), 25-frame (384 ms) segments,
normalized correlation of clipped envelopes averaged over bands/segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-8
CLAMP_DB = 60.0

STOI_WIN = 384
STOI_HOP = 240
STOI_FFT = 512
STOI_SEG = 25
STOI_BANDS = 15
STOI_F_LOW = 150.0
STOI_BETA_DB = -15.0  # clipping bound for the estimate envelope
STOI_MIN_SAMPLES = (STOI_SEG - 1) * STOI_HOP + STOI_WIN  # 384 ms at 16 kHz


class MetricError(ValueError):
    pass


def eval_sisdr(est: np.ndarray, ref: np.ndarray) -> float:
    """Same definition as the training loss, without a tape."""
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise MetricError(f"eval_sisdr: length mismatch {est.shape} vs {ref.shape}")
    er = float(ref @ ref)
    if er <= 0:
        raise MetricError("eval_sisdr: reference has zero energy")
    est = est * np.sqrt((er + EPS) / (float(est @ est) + EPS))
    alpha = float(est @ ref) / (er + EPS)
    target = alpha * ref
    resid = target - est
    num = float(target @ target) + EPS
    den = float(resid @ resid) + EPS
    return float(np.clip(10.0 * np.log10(num / den), -CLAMP_DB, CLAMP_DB))


def _third_octave_bands(sr: int = 16000) -> np.ndarray:
    """Boolean band masks (bands, bins) over the rfft grid."""
    freqs = np.fft.rfftfreq(STOI_FFT, 1.0 / sr)
    centers = STOI_F_LOW * 2.0 ** (np.arange(STOI_BANDS) / 3.0)
    lows = centers * 2.0 ** (-1.0 / 6.0)
    highs = centers * 2.0 ** (1.0 / 6.0)
    masks = np.zeros((STOI_BANDS, len(freqs)), dtype=bool)
    for k in range(STOI_BANDS):
        masks[k] = (freqs >= lows[k]) & (freqs < highs[k])
    return masks


def _frame_ffts(x: np.ndarray) -> np.ndarray:
    n_frames = (len(x) - STOI_WIN) // STOI_HOP + 1
    win = np.hanning(STOI_WIN + 2)[1:-1]
    idx = np.arange(STOI_WIN)[None, :] + STOI_HOP * np.arange(n_frames)[:, None]
    return np.fft.rfft(x[idx] * win[None, :], n=STOI_FFT, axis=1)


def eval_stoi(est: np.ndarray, ref: np.ndarray, sr: int = 16000) -> float:
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise MetricError(f"eval_stoi: length mismatch {est.shape} vs {ref.shape}")
    if sr != 16000:
        raise MetricError("eval_stoi: only the 16 kHz path is implemented")
    if len(ref) < STOI_MIN_SAMPLES:
        raise MetricError(f"eval_stoi: need at least {STOI_MIN_SAMPLES} samples (384 ms), got {len(ref)}")
    spec_e = _frame_ffts(est)
    spec_r = _frame_ffts(ref)
    # drop reference frames more than 40 dB below the loudest frame
    frame_energy = np.sum(np.abs(spec_r) ** 2, axis=1)
    keep = frame_energy > np.max(frame_energy) * 10.0 ** (-40.0 / 10.0)
    if int(np.sum(keep)) < STOI_SEG:
        raise MetricError("eval_stoi: fewer than 25 active frames after silence removal")
    spec_e = spec_e[keep]
    spec_r = spec_r[keep]
    masks = _third_octave_bands(sr).T.astype(np.float64)
    env_e = np.sqrt(np.abs(spec_e) ** 2 @ masks).T  # (bands, frames)
    env_r = np.sqrt(np.abs(spec_r) ** 2 @ masks).T
    n_frames = env_r.shape[1]
    corrs = []
    clip_gain = 1.0 + 10.0 ** (-STOI_BETA_DB / 20.0)
    for m in range(STOI_SEG, n_frames + 1):
        seg_r = env_r[:, m - STOI_SEG:m]
        seg_e = env_e[:, m - STOI_SEG:m]
        # per-band energy alignment and clipping of the estimate envelope
        alpha = np.sqrt((np.sum(seg_r ** 2, axis=1) + EPS) / (np.sum(seg_e ** 2, axis=1) + EPS))
        seg_e = np.minimum(seg_e * alpha[:, None], seg_r * clip_gain)
        r0 = seg_r - seg_r.mean(axis=1, keepdims=True)
        e0 = seg_e - seg_e.mean(axis=1, keepdims=True)
        denom = np.sqrt(np.sum(r0 ** 2, axis=1) * np.sum(e0 ** 2, axis=1)) + EPS
        corrs.append(np.sum(r0 * e0, axis=1) / denom)
    score = float(np.mean(corrs))
    return float(np.clip(score, -1.0, 1.0))


@dataclass
class EvalRow:
    utt_id: str
    sisdr_db: float
    stoi: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, utt_id: str, sisdr_db: float, stoi: float):
        self.rows.append(EvalRow(utt_id, sisdr_db, stoi))

    def aggregates(self) -> dict[str, float]:
        if not self.rows:
            return {"mean_sisdr": float("nan"), "std_sisdr": float("nan"),
                    "mean_stoi": float("nan"), "std_stoi": float("nan")}
        s = np.array([r.sisdr_db for r in self.rows])
        t = np.array([r.stoi for r in self.rows])
        return {
            "mean_sisdr": float(np.mean(s)),
            "std_sisdr": float(np.std(s)),
            "mean_stoi": float(np.mean(t)),
            "std_stoi": float(np.std(t)),
        }

    def to_tsv(self) -> str:
        lines = ["id\tsisdr_db\tstoi"]
        for r in self.rows:
            lines.append(f"{r.utt_id}\t{r.sisdr_db:.6f}\t{r.stoi:.6f}")
        agg = self.aggregates()
        lines.append(f"#mean\t{agg['mean_sisdr']:.6f}\t{agg['mean_stoi']:.6f}")
        lines.append(f"#std\t{agg['std_sisdr']:.6f}\t{agg['std_stoi']:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "rows": [{"id": r.utt_id, "sisdr_db": r.sisdr_db, "stoi": r.stoi} for r in self.rows],
            "aggregates": self.aggregates(),
        }
