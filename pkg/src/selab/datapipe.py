"""Noisy/clean pair construction: SNR mixing and deterministic iteration.

Manifest format: UTF-8 text, one record per line, tab-separated
``clean_path<TAB>noise_path<TAB>snr`` where snr is either a fixed value
``x`` or a uniform range ``lo:hi`` in dB. Two optional trailing columns may
name SEB1 embedding files for the clean and the noisy signal (needed only
for file-teacher training modes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .dsp import ComplexSpectrogram, DspError, StftConfig, Waveform, read_wav, stft


class ManifestError(ValueError):
    pass


@dataclass
class SnrSpec:
    lo: float
    hi: float

    @classmethod
    def parse(cls, text: str) -> "SnrSpec":
        if ":" in text:
            lo, hi = (float(p) for p in text.split(":", 1))
        else:
            lo = hi = float(text)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ManifestError(f"non-finite snr spec '{text}'")
        if lo > hi:
            raise ManifestError(f"snr range lo > hi in '{text}'")
        return cls(lo, hi)

    @property
    def fixed(self) -> bool:
        return self.lo == self.hi

    def draw(self, rng: np.random.Generator) -> float:
        return self.lo if self.fixed else float(rng.uniform(self.lo, self.hi))


@dataclass
class MixRecord:
    clean_path: str
    noise_path: str
    snr: SnrSpec
    clean_emb: Optional[str] = None
    noisy_emb: Optional[str] = None


@dataclass
class MixManifest:
    records: list[MixRecord] = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "MixManifest":
        records = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 3:
                raise ManifestError(f"{path}:{lineno}: expected at least 3 tab-separated columns")
            if not cols[0] or not cols[1]:
                raise ManifestError(f"{path}:{lineno}: empty path")
            rec = MixRecord(cols[0], cols[1], SnrSpec.parse(cols[2]))
            if len(cols) > 3 and cols[3]:
                rec.clean_emb = cols[3]
            if len(cols) > 4 and cols[4]:
                rec.noisy_emb = cols[4]
            records.append(rec)
        if not records:
            raise ManifestError(f"{path}: empty manifest")
        return cls(records)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> tuple[Waveform, Waveform]:
    """Scale noise so 10*log10(||clean||^2 / ||g*noise||^2) == snr_db exactly."""
    if len(clean) != len(noise):
        raise ValueError(f"mix_at_snr: length mismatch {len(clean)} vs {len(noise)}")
    ec = float(np.sum(clean.samples ** 2))
    en = float(np.sum(noise.samples ** 2))
    if ec <= 0.0:
        raise ValueError("mix_at_snr: clean signal has zero energy")
    if en <= 0.0:
        raise ValueError("mix_at_snr: noise signal has zero energy")
    g = np.sqrt(ec / (en * 10.0 ** (snr_db / 10.0)))
    noisy = Waveform(clean.samples + g * noise.samples, clean.sample_rate)
    return noisy, clean


def _peak_normalize(x: np.ndarray, peak: float = 0.9) -> np.ndarray:
    m = float(np.max(np.abs(x)))
    return x * (peak / m) if m > 0 else x


def _fit_length(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Tile short signals; random-crop long ones (seeded)."""
    if len(x) < n:
        reps = -(-n // len(x))
        x = np.tile(x, reps)
    if len(x) > n:
        start = int(rng.integers(0, len(x) - n + 1))
        x = x[start:start + n]
    return x


@dataclass
class MixItem:
    index: int
    clean_id: str
    noisy_wave: Waveform
    clean_wave: Waveform
    noisy_spec: ComplexSpectrogram
    clean_spec: ComplexSpectrogram
    snr_db: float
    clean_emb: Optional[str] = None
    noisy_emb: Optional[str] = None


class DatasetIterator:
    """Deterministic (seeded) epoch iteration over a mix manifest.

    Crops and drawn SNRs are fixed per (seed, record) so repeated epochs
    revisit identical pairs; only the visit order is reshuffled per epoch.
    """

    def __init__(self, manifest: MixManifest, cfg: StftConfig = StftConfig(),
                 crop: int = 16000, seed: int = 0, peak: float = 0.9):
        if crop < cfg.window_len:
            raise ManifestError(f"crop of {crop} samples is below one window ({cfg.window_len})")
        self.manifest = manifest
        self.cfg = cfg
        self.crop = crop
        self.seed = seed
        self.peak = peak
        self._cache: dict[int, MixItem] = {}

    def _materialize(self, idx: int) -> MixItem:
        if idx in self._cache:
            return self._cache[idx]
        rec = self.manifest.records[idx]
        rng = np.random.default_rng((self.seed, idx))
        try:
            clean = read_wav(rec.clean_path)
            noise = read_wav(rec.noise_path)
        except (OSError, DspError, ValueError) as e:
            raise ManifestError(f"record {idx} ({rec.clean_path}): {e}") from e
        c = _peak_normalize(_fit_length(clean.samples, self.crop, rng), self.peak)
        n = _peak_normalize(_fit_length(noise.samples, self.crop, rng), self.peak)
        snr = rec.snr.draw(rng)
        noisy, cw = mix_at_snr(Waveform(c), Waveform(n), snr)
        item = MixItem(
            index=idx,
            clean_id=Path(rec.clean_path).stem,
            noisy_wave=noisy,
            clean_wave=cw,
            noisy_spec=stft(noisy, self.cfg),
            clean_spec=stft(cw, self.cfg),
            snr_db=snr,
            clean_emb=rec.clean_emb,
            noisy_emb=rec.noisy_emb,
        )
        self._cache[idx] = item
        return item

    def items(self) -> list[MixItem]:
        return [self._materialize(i) for i in range(len(self.manifest.records))]

    def batches(self, batch: int, epochs: Optional[int] = None) -> Iterator[list[MixItem]]:
        """Yield lists of MixItems; order is a seeded per-epoch shuffle."""
        epoch = 0
        n = len(self.manifest.records)
        while epochs is None or epoch < epochs:
            order = np.random.default_rng((self.seed, 7919, epoch)).permutation(n)
            for k in range(0, n, batch):
                yield [self._materialize(int(i)) for i in order[k:k + batch]]
            epoch += 1
