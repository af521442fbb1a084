"""Training objectives: SI-SDR plus the four teacher-guided auxiliary terms.

All losses are taped tensor expressions so gradients reach the generator
(and, for the adversarial pair, the discriminator) through the autodiff
core. Sign convention: sisdr() returns the score in dB (to be maximized);
every loss_* function returns a quantity to minimize.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

EPS = 1e-8
SISDR_CLAMP_DB = 60.0
LOG10 = float(np.log(10.0))


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_embed: float = 1.0
    lambda_adv: float = 0.1
    lambda_triplet: float = 1.0
    lambda_output: float = 1.0
    margin: float = 100.0

    def __post_init__(self):
        for name in ("lambda_embed", "lambda_adv", "lambda_triplet", "lambda_output"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be >= 0")
        if self.margin <= 0:
            raise LossError("margin must be > 0")


def sisdr(est: T.Tensor, ref: T.Tensor) -> T.Tensor:
    """Scale-invariant SDR in dB, differentiable, clamped to +-60.

    10*log10(||a Y||^2 / ||a Y - est||^2) with a = <est, Y>/||Y||^2;
    both energies carry an epsilon so degenerate pairs stay finite.
    """
    if est.shape != ref.shape:
        raise LossError(f"sisdr: shape mismatch {est.shape} vs {ref.shape}")
    ref_energy = float(np.sum(np.asarray(ref.data, dtype=np.float64) ** 2))
    if ref_energy <= 0:
        raise LossError("sisdr: reference signal has zero energy")
    # pre-scaling est to the reference energy is a mathematical no-op for a
    # scale-invariant score but keeps the epsilon guards from breaking exact
    # invariance when the projection coefficient is small
    gain = T.sqrt(T.div(T.add(T.dot(ref, ref), EPS), T.add(T.dot(est, est), EPS)))
    est = T.scale(est, gain)
    alpha = T.div(T.dot(est, ref), T.add(T.dot(ref, ref), EPS))
    target = T.scale(ref, alpha)
    resid = T.sub(target, est)
    num = T.add(T.dot(target, target), EPS)
    den = T.add(T.dot(resid, resid), EPS)
    db = T.mul(T.sub(T.log(num), T.log(den)), 10.0 / LOG10)
    return T.clamp(db, -SISDR_CLAMP_DB, SISDR_CLAMP_DB)


def sisdr_loss(est: T.Tensor, ref: T.Tensor) -> T.Tensor:
    return T.neg(sisdr(est, ref))


def batch_sisdr_loss(est: T.Tensor, ref: T.Tensor) -> T.Tensor:
    """Mean negative SI-SDR over the leading batch axis."""
    if est.shape != ref.shape:
        raise LossError(f"sisdr: shape mismatch {est.shape} vs {ref.shape}")
    B = est.shape[0]
    per = [sisdr_loss(T.reshape(T.narrow(est, 0, b, 1), est.shape[1:]),
                      T.reshape(T.narrow(ref, 0, b, 1), ref.shape[1:]))
           for b in range(B)]
    total = per[0]
    for p in per[1:]:
        total = T.add(total, p)
    return T.mul(total, 1.0 / B)


def loss_distill_embed(enc_proj: T.Tensor, teacher: T.Tensor) -> T.Tensor:
    """Mean L1 distance between projected bottleneck and teacher frames."""
    if enc_proj.shape != teacher.shape:
        raise LossError(f"distill_embed: {enc_proj.shape} vs {teacher.shape}")
    return T.mean_(T.abs_(T.sub(enc_proj, teacher)))


class Discriminator:
    """Frame-wise convolutional critic over an embedding sequence.

    Strided 1-D convolutions along the frame axis with leaky-ReLU, ending
    in one scalar score per (downsampled) frame. Training-only, so no
    causality constraint applies.
    """

    def __init__(self, dim: int, width: int = 64, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng((seed, 303))
        self.dim = dim
        plan = [(dim, width, 5, 1), (width, width, 5, 2), (width, width, 5, 2)]
        self.blocks = []
        for cin, cout, k, s in plan:
            limit = np.sqrt(6.0 / (cin * k + cout * k))
            w = T.Tensor(rng.uniform(-limit, limit, size=(cout, cin, 1, k)),
                         requires_grad=True, dtype=dtype)
            b = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
            self.blocks.append((w, b, s, (k - 1) // 2))
        limit = np.sqrt(6.0 / (width * 3 + 3))
        self.head_w = T.Tensor(rng.uniform(-limit, limit, size=(1, width, 1, 3)),
                               requires_grad=True, dtype=dtype)
        self.head_b = T.Tensor(np.zeros(1), requires_grad=True, dtype=dtype)

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for i, (w, b, _, _) in enumerate(self.blocks):
            out[f"disc.block{i}.w"] = w
            out[f"disc.block{i}.b"] = b
        out["disc.head.w"] = self.head_w
        out["disc.head.b"] = self.head_b
        return out

    def scores(self, e: T.Tensor) -> T.Tensor:
        """e (frames, dim) -> per-frame scores (frames',)."""
        if e.shape[-1] != self.dim:
            raise LossError(f"discriminator expects dim {self.dim}, got {e.shape[-1]}")
        Tn = e.shape[0]
        # frames become the convolved axis: (1, dim, 1, frames)
        x = T.reshape(T.transpose_(e, (1, 0)), (1, self.dim, 1, Tn))
        for w, b, s, p in self.blocks:
            x = T.leaky_relu(T.conv2d(x, w, b, stride_f=s, pad_f=p), 0.2)
        x = T.conv2d(x, self.head_w, self.head_b, stride_f=1, pad_f=1)
        return T.reshape(x, (x.shape[-1],))


def loss_adversarial(enc_proj: T.Tensor, teacher: T.Tensor,
                     d: Discriminator) -> tuple[T.Tensor, T.Tensor]:
    """Least-squares GAN pair.

    gen_loss = mean (D(fake) - 1)^2, pulling generator output toward the
    teacher distribution; disc_loss = 1/2 mean D(fake)^2 + 1/2 mean
    (D(real) - 1)^2 on a detached fake so discriminator gradients never
    reach the generator.
    """
    if enc_proj.shape != teacher.shape:
        raise LossError(f"adversarial: {enc_proj.shape} vs {teacher.shape}")
    fake = d.scores(enc_proj)
    gen_loss = T.mean_(T.mul(T.sub(fake, 1.0), T.sub(fake, 1.0)))
    fake_d = d.scores(enc_proj.detach())
    real_d = d.scores(teacher.detach())
    disc_loss = T.add(
        T.mul(T.mean_(T.mul(fake_d, fake_d)), 0.5),
        T.mul(T.mean_(T.mul(T.sub(real_d, 1.0), T.sub(real_d, 1.0))), 0.5))
    return gen_loss, disc_loss


def loss_triplet(anchor: T.Tensor, positive: T.Tensor, negative: T.Tensor,
                 margin: float = 100.0) -> T.Tensor:
    """Per-frame L2 hinge: mean_t max(||a-p|| - ||a-n|| + m, 0)."""
    if not (anchor.shape == positive.shape == negative.shape):
        raise LossError(f"triplet: {anchor.shape}/{positive.shape}/{negative.shape}")
    if margin <= 0:
        raise LossError("triplet margin must be > 0")
    dp = T.sub(anchor, positive)
    dn = T.sub(anchor, negative)
    d_ap = T.sqrt(T.sum_(T.mul(dp, dp), axis=-1))
    d_an = T.sqrt(T.sum_(T.mul(dn, dn), axis=-1))
    return T.mean_(T.relu(T.add(T.sub(d_ap, d_an), margin)))


def loss_distill_output(est_spec: tuple[T.Tensor, T.Tensor],
                        ref_spec: tuple[T.Tensor, T.Tensor],
                        teacher_fn: Callable) -> T.Tensor:
    """Mean L1 between teacher embeddings of the estimate and the reference.

    teacher_fn maps a (real, imag) spectrogram pair to an embedding tensor
    and must be differentiable (gradients flow through the teacher into
    the estimate); reference embeddings are detached.
    """
    est_e = teacher_fn(*est_spec)
    ref_e = teacher_fn(ref_spec[0].detach(), ref_spec[1].detach()).detach()
    return T.mean_(T.abs_(T.sub(est_e, ref_e)))
