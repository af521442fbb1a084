import numpy as np
import pytest
from scipy.io import wavfile


def speechlike(n: int, seed: int, sr: int = 16000) -> np.ndarray:
    """Voiced harmonic stack with syllable-rate AM, brief pauses and a tiny
    noise floor; peak-normalized. Stands in for real recordings. The pause
    gate is fast and shallow so every one-second crop stays mostly voiced."""
    r = np.random.default_rng(seed)
    t = np.arange(n) / sr
    f0 = 120 + 30 * np.sin(2 * np.pi * 1.1 * t + r.uniform(0, 6))
    phase = np.cumsum(2 * np.pi * f0 / sr)
    x = sum(np.sin(k * phase) / k for k in range(1, 9))
    am = 0.55 + 0.45 * np.sin(2 * np.pi * 3.7 * t + r.uniform(0, 6))
    gate = np.sin(2 * np.pi * 2.5 * t + r.uniform(0, 6)) > -0.85
    x = x * am * np.where(gate, 1.0, 0.003) + 0.003 * r.normal(size=n)
    return x / np.max(np.abs(x))


def write_pcm16(path, x: np.ndarray, sr: int = 16000):
    wavfile.write(path, sr, (np.clip(x, -1, 1) * 32767 * 0.8).astype(np.int16))


def make_corpus(root, n_clips: int = 10, n_samples: int = 16000, snr="-5",
                seed0: int = 100) -> str:
    """Clean/noise WAV pairs plus a manifest; returns the manifest path."""
    lines = []
    for i in range(n_clips):
        c = speechlike(n_samples, seed0 + i)
        nz = np.random.default_rng(seed0 + 1000 + i).normal(size=n_samples)
        nz = nz / np.max(np.abs(nz))
        cp = root / f"clean{i}.wav"
        np_ = root / f"noise{i}.wav"
        write_pcm16(cp, c)
        write_pcm16(np_, nz)
        lines.append(f"{cp}\t{np_}\t{snr}")
    man = root / "manifest.tsv"
    man.write_text("\n".join(lines) + "\n")
    return str(man)


@pytest.fixture
def corpus(tmp_path):
    return make_corpus(tmp_path, n_clips=4, n_samples=16000)
