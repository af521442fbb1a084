"""STFT analysis/synthesis on the 25 ms / 20 ms grid, offline and streaming.

The default window is sqrt-Tukey with a taper of window_len - hop samples
on each side: the analysis/synthesis product is then a Tukey window whose
shifted copies overlap-add to exactly 1 at this 20% overlap, so synthesis
stays bounded and reconstruction is exact away from the signal ends. A
Hann analysis window with the least-squares dual synthesis window is also
available, but its dual grows like 1/w near frame boundaries at low
overlap, which amplifies any spectral modification by close to an order of
magnitude there; with modified (enhanced) spectra that is ruinous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from . import tensor as T


class DspError(ValueError):
    pass


@dataclass
class StftConfig:
    window_len: int = 400
    hop: int = 320
    fft_size: int = 512
    window: str = "sqrt_tukey"  # sqrt_tukey | hann

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len <= self.fft_size):
            raise DspError(
                f"need hop <= window_len <= fft_size, got {self.hop}/{self.window_len}/{self.fft_size}")
        if self.window not in ("sqrt_tukey", "hann"):
            raise DspError(f"unknown window type '{self.window}'")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            raise DspError(f"input of {n_samples} samples is shorter than one window ({self.window_len})")
        return (n_samples - self.window_len) // self.hop + 1

    def analysis_window(self) -> np.ndarray:
        n = np.arange(self.window_len)
        if self.window == "hann":
            return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_len)).astype(np.float64)
        # sqrt of a Tukey window whose raised-cosine tapers span exactly the
        # overlap region, so shifted analysis*synthesis products sum to 1
        taper = self.window_len - self.hop
        w = np.ones(self.window_len)
        if taper > 0:
            u = np.arange(taper)
            ramp = 0.5 * (1.0 - np.cos(np.pi * (u + 0.5) / taper))
            w[:taper] = ramp
            w[-taper:] = ramp[::-1]
        return np.sqrt(w)

    def synthesis_window(self) -> np.ndarray:
        return self.analysis_window()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise DspError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise DspError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)


class ComplexSpectrogram:
    """frames x bins complex grid stored as separate real/imag arrays."""

    def __init__(self, real: np.ndarray, imag: np.ndarray):
        real = np.asarray(real, dtype=np.float64)
        imag = np.asarray(imag, dtype=np.float64)
        if real.shape != imag.shape or real.ndim != 2:
            raise DspError(f"real/imag shape mismatch: {real.shape} vs {imag.shape}")
        self.real = real
        self.imag = imag

    @property
    def frames(self) -> int:
        return self.real.shape[0]

    @property
    def bins(self) -> int:
        return self.real.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Frame t covers samples [t*hop, t*hop + window_len)."""
    x = w.samples
    n_frames = cfg.frame_count(len(x))
    win = cfg.analysis_window()
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * win[None, :]
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return ComplexSpectrogram(spec.real, spec.imag)


def _ola_norm(cfg: StftConfig, n_frames: int) -> tuple[np.ndarray, int]:
    """Summed analysis*synthesis window per output sample, epsilon-guarded.
    Identically 1 in the interior for the sqrt-Tukey pair."""
    out_len = (n_frames - 1) * cfg.hop + cfg.window_len
    prod = cfg.analysis_window() * cfg.synthesis_window()
    denom = np.zeros(out_len)
    for t in range(n_frames):
        denom[t * cfg.hop:t * cfg.hop + cfg.window_len] += prod
    return denom + 1e-8, out_len


def istft(s: ComplexSpectrogram, cfg: StftConfig = StftConfig()) -> Waveform:
    """Least-squares weighted overlap-add synthesis."""
    if s.bins != cfg.bins:
        raise DspError(f"spectrogram has {s.bins} bins, config expects {cfg.bins}")
    win = cfg.synthesis_window()
    frames = np.fft.irfft(s.real + 1j * s.imag, n=cfg.fft_size, axis=1)[:, :cfg.window_len]
    denom, out_len = _ola_norm(cfg, s.frames)
    out = np.zeros(out_len)
    for t in range(s.frames):
        out[t * cfg.hop:t * cfg.hop + cfg.window_len] += frames[t] * win
    return Waveform(out / denom)


def istft_tensor(real: T.Tensor, imag: T.Tensor, cfg: StftConfig = StftConfig()) -> T.Tensor:
    """Differentiable iSTFT: (..., frames, bins) tensors -> (..., samples).

    Same math as istft(); used inside training so waveform losses can
    backpropagate into predicted spectrograms.
    """
    n_frames = real.shape[-2]
    if real.shape[-1] != cfg.bins:
        raise DspError(f"spectrogram has {real.shape[-1]} bins, config expects {cfg.bins}")
    frames = T.irdft(real, imag, cfg.fft_size)
    frames = T.narrow(frames, -1, 0, cfg.window_len)
    win = T.Tensor(cfg.synthesis_window().astype(real.dtype))
    frames = T.scale_last(frames, win)
    denom, out_len = _ola_norm(cfg, n_frames)
    out = T.overlap_add(frames, cfg.hop, out_len)
    return T.scale_last(out, T.Tensor((1.0 / denom).astype(real.dtype)))


class StreamingStft:
    """Push hop-sized chunks, receive frames identical to offline stft."""

    def __init__(self, cfg: StftConfig = StftConfig()):
        self.cfg = cfg
        self._buf = np.zeros(0)
        self._win = cfg.analysis_window()

    def push(self, chunk: np.ndarray) -> ComplexSpectrogram:
        chunk = np.asarray(chunk, dtype=np.float64).reshape(-1)
        if len(chunk) != self.cfg.hop:
            raise DspError(f"chunk must be exactly {self.cfg.hop} samples, got {len(chunk)}")
        self._buf = np.concatenate([self._buf, chunk])
        frames = []
        while len(self._buf) >= self.cfg.window_len:
            seg = self._buf[:self.cfg.window_len] * self._win
            frames.append(np.fft.rfft(seg, n=self.cfg.fft_size))
            self._buf = self._buf[self.cfg.hop:]
        if frames:
            spec = np.asarray(frames)
            return ComplexSpectrogram(spec.real, spec.imag)
        return ComplexSpectrogram(np.zeros((0, self.cfg.bins)), np.zeros((0, self.cfg.bins)))


# ---------------------------------------------------------------------------
# WAV I/O (PCM16 and float32 mono at 16 kHz; no resampling)
# ---------------------------------------------------------------------------

def read_wav(path, expect_rate: int = 16000) -> Waveform:
    rate, data = wavfile.read(path)
    if rate != expect_rate:
        raise DspError(f"{path}: sample rate {rate} Hz not supported, expected {expect_rate} Hz (no resampler)")
    if data.ndim != 1:
        raise DspError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise DspError(f"{path}: unsupported sample format {data.dtype}, use PCM16 or float32")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, fmt: str = "pcm16"):
    if fmt == "pcm16":
        clipped = np.clip(w.samples, -1.0, 1.0)
        wavfile.write(path, w.sample_rate, (clipped * 32767.0).astype(np.int16))
    elif fmt == "float32":
        wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
    else:
        raise DspError(f"unknown wav format '{fmt}'")
