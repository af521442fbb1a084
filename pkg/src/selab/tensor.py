"""Reverse-mode automatic differentiation over dense numpy tensors.

Everything the enhancement model, the discriminator and the losses need is
implemented here as taped operations with hand-written backward rules, plus
the Adam optimizer and a finite-difference gradient checker. There is no
broadcasting beyond scalar-tensor (and the two dedicated bias/scale ops),
which keeps every backward rule auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable for an op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: non-conformable shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class TapeError(RuntimeError):
    """Raised on invalid backward requests (non-scalar or detached loss)."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class TapeEntry:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops.

    Entries are appended in execution order, so the list is topologically
    sorted by construction; ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def record(self, name, inputs, output, backward):
        self.entries.append(TapeEntry(name, inputs, output, backward))
        output._tape = self
        output._entry_idx = len(self.entries) - 1

    def clear(self):
        self.entries.clear()


class _TapeHolder(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_STATE = _TapeHolder()


def active_tape() -> Tape:
    return _STATE.tape


def reset_tape():
    _STATE.tape = Tape()


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Dense n-d array with optional gradient.

    data is float32 for training or float64 for gradient checking; grad,
    when present, always matches data's shape and dtype.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._entry_idx: Optional[int] = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError("accumulate_grad", self.data.shape, g.shape)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x), dtype=like.dtype))


def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward: Callable) -> Tensor:
    out = Tensor(out_data)
    if _STATE.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _STATE.tape.record(name, tuple(inputs), out, backward)
    return out


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from loss.

    The loss must be scalar and recorded on the active tape; the tape is
    consumed (cleared) afterwards so each training step starts fresh.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if (tape is None or loss._entry_idx is None
            or loss._entry_idx >= len(tape.entries)
            or tape.entries[loss._entry_idx].output is not loss):
        raise TapeError("loss is detached from the tape (no recorded op produced it)")
    loss.accumulate_grad(np.ones_like(loss.data))
    for entry in reversed(tape.entries[: loss._entry_idx + 1]):
        g = entry.output.grad
        if g is None:
            continue
        grads = entry.backward(g)
        for t, gi in zip(entry.inputs, grads):
            if gi is not None and t.requires_grad:
                t.accumulate_grad(gi)
    tape.clear()


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):  # scalar fast path
        s = float(b)
        return _record("add_s", [a], a.data + s, lambda g: (g,))
    _same_shape("add", a, b)
    return _record("add", [a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _record("sub_s", [a], a.data - s, lambda g: (g,))
    _same_shape("sub", a, b)
    return _record("sub", [a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _record("mul_s", [a], a.data * s, lambda g: (g * s,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return g / bd, -g * ad / (bd * bd)

    return _record("div", [a, b], out, bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", [a], -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", [a], out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record("log", [a], np.log(ad), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    """Square root with a zero subgradient at 0 (used for L2 distances)."""
    out = np.sqrt(a.data)

    def bwd(g):
        denom = 2.0 * out
        gi = np.where(denom > 1e-12, g / np.where(denom > 1e-12, denom, 1.0), 0.0)
        return (gi.astype(a.dtype),)

    return _record("sqrt", [a], out, bwd)


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _record("abs", [a], np.abs(ad), lambda g: (g * np.sign(ad),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = ((ad > lo) & (ad < hi)).astype(a.dtype)
    return _record("clamp", [a], out, lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = (ad > 0).astype(a.dtype)
    return _record("relu", [a], ad * mask, lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    mult = np.where(ad > 0, 1.0, slope).astype(a.dtype)
    return _record("leaky_relu", [a], ad * mult, lambda g: (g * mult,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    ad = a.data
    neg_part = alpha * (np.exp(np.minimum(ad, 0.0)) - 1.0)
    out = np.where(ad > 0, ad, neg_part).astype(a.dtype)
    mult = np.where(ad > 0, 1.0, neg_part + alpha).astype(a.dtype)
    return _record("elu", [a], out, lambda g: (g * mult,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", [a], out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", [a], out, lambda g: (g * (1.0 - out * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / (np.sum(e, axis=axis, keepdims=True) + 1e-8)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", [a], out, bwd)


# ---------------------------------------------------------------------------
# Reductions and structure ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).astype(a.dtype),)

    return _record("sum", [a], np.asarray(out, dtype=a.dtype), bwd)


def mean_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _record("reshape", [a], out, lambda g: (g.reshape(a.shape),))


def transpose_(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _record("transpose", [a], out, lambda g: (np.transpose(g, inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        gi = np.zeros(a.shape, dtype=a.dtype)
        gi[idx] = g
        return (gi,)

    return _record("narrow", [a], out.copy(), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise ShapeError("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offs[i], offs[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _record("concat", tensors, out, bwd)


def duplicate(a: Tensor, axis: int = -1) -> Tensor:
    """Repeat every element twice along axis: [a, b] -> [a, a, b, b]."""
    out = np.repeat(a.data, 2, axis=axis)
    ax = axis % a.data.ndim

    def bwd(g):
        shp = list(a.shape)
        shp.insert(ax + 1, 2)
        return (g.reshape(shp).sum(axis=ax + 1),)

    return _record("duplicate", [a], out, bwd)


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., K) @ (K, M). b must be 2-D."""
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        if b.requires_grad:
            gflat = g.reshape(-1, g.shape[-1])
            aflat = a.data.reshape(-1, a.shape[-1])
            gb = aflat.T @ gflat
        else:
            gb = None
        return ga, gb

    return _record("matmul", [a, b], out, bwd)


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the last axis of a."""
    if b.data.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("bias_add", a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return g, gb

    return _record("bias_add", [a, b], out, bwd)


def scale_last(a: Tensor, v: Tensor) -> Tensor:
    """Multiply by a vector over the last axis of a."""
    if v.data.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise ShapeError("scale_last", a.shape, v.shape)
    out = a.data * v.data

    def bwd(g):
        ga = g * v.data if a.requires_grad else None
        gv = (g * a.data).reshape(-1, g.shape[-1]).sum(axis=0) if v.requires_grad else None
        return ga, gv

    return _record("scale_last", [a, v], out, bwd)


def frame_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-frame layer norm for (B, C, T, F) maps: normalize over (C, F)
    within each (b, t), then apply a per-channel affine. Uses no cross-frame
    statistics, so it preserves causality and is identical when streaming.
    """
    if x.data.ndim != 4 or gain.data.ndim != 1 or gain.shape[0] != x.shape[1]:
        raise ShapeError("frame_norm", x.shape, gain.shape)
    if bias.shape != gain.shape:
        raise ShapeError("frame_norm", gain.shape, bias.shape)
    B, C, Tn, F = x.shape
    mu = x.data.mean(axis=(1, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gain.data.reshape(1, C, 1, 1)
    out = xhat * g4 + bias.data.reshape(1, C, 1, 1)

    def bwd(g):
        gx = ggain = gbias = None
        gxhat = g * g4
        if x.requires_grad:
            m1 = gxhat.mean(axis=(1, 3), keepdims=True)
            m2 = (gxhat * xhat).mean(axis=(1, 3), keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=(0, 2, 3))
        if bias.requires_grad:
            gbias = g.sum(axis=(0, 2, 3))
        return gx, ggain, gbias

    return _record("frame_norm", [x, gain, bias], out, bwd)


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x by a single-element tensor s (differentiable in both)."""
    if s.data.size != 1:
        raise ShapeError("scale", x.shape, s.shape)
    sv = float(s.data.reshape(-1)[0])
    out = x.data * sv

    def bwd(g):
        gx = g * sv if x.requires_grad else None
        gs = np.full(s.shape, np.sum(g * x.data), dtype=s.dtype) if s.requires_grad else None
        return gx, gs

    return _record("scale", [x, s], out, bwd)


def mix_layers(w: Tensor, e: Tensor) -> Tensor:
    """Convex mix out = sum_l w[l] * e[l], w shape (L,), e shape (L, ...)."""
    if w.data.ndim != 1 or e.shape[0] != w.shape[0]:
        raise ShapeError("mix_layers", w.shape, e.shape)
    out = np.tensordot(w.data, e.data, axes=([0], [0]))

    def bwd(g):
        gw = np.tensordot(e.data, g, axes=(list(range(1, e.data.ndim)),
                                            list(range(g.ndim)))) if w.requires_grad else None
        ge = w.data.reshape((-1,) + (1,) * g.ndim) * g[None] if e.requires_grad else None
        return gw, ge

    return _record("mix_layers", [w, e], out, bwd)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------
#
# Layout: x (B, C, T, F), w (O, C, kt, kf). Time is padded on the left only
# (kt-1 zeros) so output frame t never sees input frames > t; frequency is
# padded symmetrically by pad_f and strided by stride_f.

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride_f: int = 1, pad_f: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, C, T, F = x.shape
    O, _, kt, kf = w.shape
    Fp = F + 2 * pad_f
    if Fp < kf:
        raise ShapeError("conv2d", x.shape, w.shape)
    Fo = (Fp - kf) // stride_f + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (kt - 1, 0), (pad_f, pad_f)))
    out = np.zeros((B, O, T, Fo), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            xs = xp[:, :, i:i + T, j:j + stride_f * (Fo - 1) + 1:stride_f]
            out += np.einsum("oc,bctf->botf", w.data[:, :, i, j], xs, optimize=True)
    if b is not None:
        out += b.data.reshape(1, O, 1, 1)

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    gxp[:, :, i:i + T, j:j + stride_f * (Fo - 1) + 1:stride_f] += np.einsum(
                        "oc,botf->bctf", w.data[:, :, i, j], g, optimize=True)
            gx = gxp[:, :, kt - 1:, pad_f:pad_f + F]
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kt):
                for j in range(kf):
                    xs = xp[:, :, i:i + T, j:j + stride_f * (Fo - 1) + 1:stride_f]
                    gw[:, :, i, j] = np.einsum("botf,bctf->oc", g, xs, optimize=True)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = [x, w] if b is None else [x, w, b]
    return _record("conv2d", inputs, out, bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     stride_f: int = 1, pad_f: int = 0,
                     causal: bool = True) -> Tensor:
    """Transposed convolution, the scatter dual of conv2d.

    With causal=False the time axis is cropped so the op is the exact
    gradient-adjoint of conv2d (it then looks kt-1 frames ahead). The
    decoder uses causal=True, which is the same computation delayed by
    kt-1 frames so output t depends only on inputs <= t.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    B, C, T, F = x.shape
    _, O, kt, kf = w.shape
    Fo = (F - 1) * stride_f + kf - 2 * pad_f
    if Fo < 1:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    full = np.zeros((B, O, T + kt - 1, (F - 1) * stride_f + kf), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            full[:, :, i:i + T, j:j + stride_f * (F - 1) + 1:stride_f] += np.einsum(
                "co,bctf->botf", w.data[:, :, i, j], x.data, optimize=True)
    t0 = 0 if causal else kt - 1
    out = full[:, :, t0:t0 + T, pad_f:pad_f + Fo].copy()
    if b is not None:
        out += b.data.reshape(1, O, 1, 1)

    def bwd(g):
        gfull = np.zeros_like(full)
        gfull[:, :, t0:t0 + T, pad_f:pad_f + Fo] = g
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kt):
                for j in range(kf):
                    gs = gfull[:, :, i:i + T, j:j + stride_f * (F - 1) + 1:stride_f]
                    gx += np.einsum("co,botf->bctf", w.data[:, :, i, j], gs, optimize=True)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kt):
                for j in range(kf):
                    gs = gfull[:, :, i:i + T, j:j + stride_f * (F - 1) + 1:stride_f]
                    gw[:, :, i, j] = np.einsum("bctf,botf->co", x.data, gs, optimize=True)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = [x, w] if b is None else [x, w, b]
    return _record("conv_transpose2d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# Signal ops (inverse DFT + overlap-add, for a differentiable iSTFT)
# ---------------------------------------------------------------------------

def irdft(re: Tensor, im: Tensor, n: int) -> Tensor:
    """Inverse real DFT of a half spectrum (..., n//2+1) -> (..., n).

    Imaginary parts of bins 0 and n/2 carry no degrees of freedom in a real
    signal and are ignored (projected to zero).
    """
    _same_shape("irdft", re, im)
    if n % 2 != 0:
        raise ValueError("irdft: n must be even")
    K = n // 2 + 1
    if re.shape[-1] != K:
        raise ShapeError("irdft", re.shape, (K,))
    imd = im.data.copy()
    imd[..., 0] = 0.0
    imd[..., -1] = 0.0
    z = re.data.astype(np.float64) + 1j * imd.astype(np.float64)
    out = np.fft.irfft(z, n=n, axis=-1).astype(re.dtype)

    def bwd(g):
        R = np.fft.rfft(g.astype(np.float64), n=n, axis=-1)
        gre = (2.0 / n) * R.real
        gre[..., 0] *= 0.5
        gre[..., -1] *= 0.5
        gim = (2.0 / n) * R.imag
        gim[..., 0] = 0.0
        gim[..., -1] = 0.0
        return gre.astype(re.dtype), gim.astype(im.dtype)

    return _record("irdft", [re, im], out, bwd)


def overlap_add(frames: Tensor, hop: int, out_len: int) -> Tensor:
    """Scatter-add frames (..., T, L) into a signal (..., out_len)."""
    *lead, T, L = frames.shape
    if out_len < (T - 1) * hop + L:
        raise ShapeError("overlap_add", frames.shape, (out_len,))
    out = np.zeros(tuple(lead) + (out_len,), dtype=frames.dtype)
    fd = frames.data
    for t in range(T):
        out[..., t * hop:t * hop + L] += fd[..., t, :]

    def bwd(g):
        gf = np.empty(frames.shape, dtype=frames.dtype)
        for t in range(T):
            gf[..., t, :] = g[..., t * hop:t * hop + L]
        return (gf,)

    return _record("overlap_add", [frames], out, bwd)


# ---------------------------------------------------------------------------
# Composite helpers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return bias_add(out, b) if b is not None else out


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_(mul(a, b))


def l2_norm_sq(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return sum_(mul(a, a), axis=axis)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-row cosine similarity over the last axis; output drops that axis."""
    _same_shape("cosine_similarity", a, b)
    num = sum_(mul(a, b), axis=-1)
    na = sqrt(add(sum_(mul(a, a), axis=-1), eps))
    nb = sqrt(add(sum_(mul(b, b), axis=-1), eps))
    return div(num, mul(na, nb))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter Adam moments plus hyperparameters.

    Step counter increases once per adam_step call over the whole set.
    """

    def __init__(self, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], state: AdamState):
    """Standard bias-corrected Adam update; clears grads afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter '{name}' has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.epsilon)
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is <= max_norm."""
    params = [p for p in params if p.grad is not None]
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn w.r.t. x (64-bit use)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = fn().item()
        flat[i] = orig - h
        with no_grad():
            fm = fn().item()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradient(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                   h: float = 1e-5, tol: float = 1e-5) -> float:
    """Compare analytic grads of fn() against central differences.

    Returns the worst relative error, defined elementwise as
    |a - n| / max(|a|, |n|, 1). Raises AssertionError above tol.
    """
    for t in inputs:
        t.zero_grad()
    loss = fn()
    backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        ana = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        num = numerical_grad(fn, t, h=h)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
        rel = float(np.max(np.abs(ana - num) / denom))
        worst = max(worst, rel)
        t.zero_grad()
    if worst > tol:
        raise AssertionError(f"gradient check failed: rel err {worst:.3e} > {tol:.1e}")
    return worst
