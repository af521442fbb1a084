"""Teacher embedding sequences: SEB1 file I/O, layer views, synthetic teacher.

SEB1 layout (all integers little-endian u32):
    magic "SEB1" | version=1 | L | T | D | hop_samples | sample_rate
    then L*T*D float32 values, layer-major then frame-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .dsp import ComplexSpectrogram

MAGIC = b"SEB1"
VERSION = 1


class EmbeddingError(ValueError):
    pass


class EmbeddingSequence:
    """layers x frames x dim teacher activations on the 20 ms frame grid."""

    def __init__(self, data: np.ndarray, hop_samples: int = 320, sample_rate: int = 16000):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 3:
            raise EmbeddingError(f"expected (L, T, D) data, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise EmbeddingError("embedding data contains non-finite values")
        self.data = data
        self.hop_samples = hop_samples
        self.sample_rate = sample_rate

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def save_embeddings(path, e: EmbeddingSequence):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<6I", VERSION, e.layers, e.frames, e.dim,
                            e.hop_samples, e.sample_rate))
        f.write(np.ascontiguousarray(e.data, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingSequence:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise EmbeddingError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 28:
        raise EmbeddingError(f"{path}: truncated header, {len(blob)} bytes")
    version, L, Tn, D, hop, rate = struct.unpack_from("<6I", blob, 4)
    if version != VERSION:
        raise EmbeddingError(f"{path}: unsupported version {version}")
    expected = 28 + 4 * L * Tn * D
    if len(blob) != expected:
        raise EmbeddingError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=L * Tn * D, offset=28).reshape(L, Tn, D)
    return EmbeddingSequence(data.copy(), hop_samples=hop, sample_rate=rate)


class LayerWeights:
    """Learnable logits whose softmax mixes the teacher layers."""

    def __init__(self, n_layers: int, dtype=np.float32):
        self.logits = T.Tensor(np.zeros(n_layers), requires_grad=True, dtype=dtype)

    def weights(self) -> T.Tensor:
        return T.softmax(self.logits, axis=-1)


def weighted_sum(e: EmbeddingSequence, w: LayerWeights) -> T.Tensor:
    """out[t] = sum_l softmax(logits)_l * e[l][t]; differentiable in logits."""
    if w.logits.shape[0] != e.layers:
        raise EmbeddingError(f"{w.logits.shape[0]} logits for {e.layers} layers")
    data = T.Tensor(e.data.astype(w.logits.dtype))
    return T.mix_layers(w.weights(), data)


def last_layer(e: EmbeddingSequence) -> np.ndarray:
    return e.data[-1]


def align_frames(*lengths: int) -> int:
    """Teacher and spectrogram grids may disagree by one frame; use the min."""
    m = min(lengths)
    if max(lengths) - m > 1:
        raise EmbeddingError(f"frame counts {lengths} differ by more than 1")
    return m


class SyntheticTeacher:
    """Frozen random causal conv stack over magnitude features.

    Stands in for a real SSL model so every training mode runs without
    exported embeddings: L=4 layers, D=64, frame count preserved,
    deterministic for a given seed, never trained. Differentiable, which
    the output-distillation objective requires.
    """

    LAYERS = 4
    DIM = 64

    def __init__(self, bins: int = 257, seed: int = 1234, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.bins = bins
        self.dtype = dtype
        scale_in = np.sqrt(2.0 / bins)
        self.w_in = T.Tensor(rng.normal(0.0, scale_in, size=(bins, self.DIM)), dtype=dtype)
        self.b_in = T.Tensor(np.zeros(self.DIM), dtype=dtype)
        scale_h = np.sqrt(1.0 / (2 * self.DIM))
        # each hidden layer mixes the current and previous frame (causal, k=2)
        self.w_cur = [T.Tensor(rng.normal(0.0, scale_h, size=(self.DIM, self.DIM)), dtype=dtype)
                      for _ in range(self.LAYERS - 1)]
        self.w_prev = [T.Tensor(rng.normal(0.0, scale_h, size=(self.DIM, self.DIM)), dtype=dtype)
                       for _ in range(self.LAYERS - 1)]
        self.b_h = [T.Tensor(np.zeros(self.DIM), dtype=dtype) for _ in range(self.LAYERS - 1)]

    def layers_tensor(self, real: T.Tensor, imag: T.Tensor) -> list[T.Tensor]:
        """All layer activations for (..., frames, bins) spectrograms."""
        if real.shape[-1] != self.bins:
            raise EmbeddingError(f"expected {self.bins} bins, got {real.shape[-1]}")
        mag = T.sqrt(T.add(T.add(T.mul(real, real), T.mul(imag, imag)), 1e-8))
        h = T.tanh(T.linear(mag, self.w_in, self.b_in))
        acts = [h]
        t_axis = len(h.shape) - 2
        n = h.shape[t_axis]
        for w_c, w_p, b in zip(self.w_cur, self.w_prev, self.b_h):
            prev = T.concat([T.narrow(h, t_axis, 0, 1), T.narrow(h, t_axis, 0, n - 1)], axis=t_axis)
            h = T.tanh(T.bias_add(T.add(T.matmul(h, w_c), T.matmul(prev, w_p)), b))
            acts.append(h)
        return acts

    def embed_tensor(self, real: T.Tensor, imag: T.Tensor) -> T.Tensor:
        """Last-layer activations, differentiable w.r.t. the spectrogram."""
        return self.layers_tensor(real, imag)[-1]

    def __call__(self, spec: ComplexSpectrogram) -> EmbeddingSequence:
        with T.no_grad():
            acts = self.layers_tensor(
                T.Tensor(spec.real, dtype=self.dtype), T.Tensor(spec.imag, dtype=self.dtype))
        return EmbeddingSequence(np.stack([a.data for a in acts]).astype(np.float32))
