"""Finite-difference verification of every differentiable op and loss.

Everything runs in 64-bit with central differences (h = 1e-5) against the
relative-error criterion of check_gradient. The composed-model check probes
a random subset of parameters of a micro-sized network, which keeps the
whole suite comfortably under the two-minute budget.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .dsp import StftConfig, istft_tensor
from .gcrn import Gcrn, preset
from .teacher import SyntheticTeacher

H_FD = 1e-5
TOL = 1e-5


def _rand(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _const(rng, *shape):
    return T.Tensor(rng.normal(size=shape), dtype=np.float64)


def op_checks(rng) -> dict[str, Callable[[], float]]:
    """Each entry builds fresh tensors and returns the worst relative error."""
    checks: dict[str, Callable[[], float]] = {}

    def simple(name, fn, *shapes, positive=False):
        def run():
            ins = []
            for s in shapes:
                x = _rand(rng, *s)
                if positive:
                    x.data = np.abs(x.data) + 0.5
                ins.append(x)
            with T.no_grad():
                out_shape = fn(*ins).shape
            m = _const(rng, *out_shape)
            return T.check_gradient(lambda: T.sum_(T.mul(fn(*ins), m)), ins, h=H_FD, tol=TOL)
        checks[name] = run

    simple("add", T.add, (3, 4), (3, 4))
    simple("sub", T.sub, (3, 4), (3, 4))
    simple("mul", T.mul, (3, 4), (3, 4))
    simple("div", lambda a, b: T.div(a, b), (3, 4), (3, 4), positive=True)
    simple("neg", T.neg, (5,))
    simple("exp", T.exp, (3, 3))
    simple("log", T.log, (6,), positive=True)
    simple("sqrt", T.sqrt, (6,), positive=True)
    simple("abs", T.abs_, (4, 4))
    simple("sigmoid", T.sigmoid, (3, 5))
    simple("tanh", T.tanh, (3, 5))
    simple("elu", T.elu, (3, 5))
    simple("leaky_relu", T.leaky_relu, (3, 5))
    simple("relu", T.relu, (3, 5))
    simple("softmax", lambda x: T.softmax(x, -1), (3, 6))
    simple("clamp", lambda x: T.clamp(x, -0.7, 0.7), (4, 4))
    simple("matmul", T.matmul, (4, 5), (5, 3))
    simple("bias_add", T.bias_add, (4, 5), (5,))
    simple("scale_last", T.scale_last, (4, 5), (5,))
    simple("reshape", lambda x: T.reshape(x, (2, 6)), (3, 4))
    simple("transpose", lambda x: T.transpose_(x, (1, 0)), (3, 4))
    simple("narrow", lambda x: T.narrow(x, 1, 1, 2), (3, 4))
    simple("duplicate", lambda x: T.duplicate(x, -1), (3, 4))
    simple("sum_axis", lambda x: T.sum_(x, axis=1), (3, 4))
    simple("mean", lambda x: T.mean_(x, axis=0), (3, 4))
    simple("concat", lambda a, b: T.concat([a, b], axis=1), (3, 2), (3, 3))
    simple("scale", lambda x, s: T.scale(x, s), (3, 4), (1,))
    simple("mix_layers", T.mix_layers, (3,), (3, 4, 2))
    simple("cosine_similarity", T.cosine_similarity, (4, 6), (4, 6))
    simple("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride_f=2, pad_f=1),
           (2, 3, 4, 7), (4, 3, 2, 3), (4,))
    simple("conv_transpose2d",
           lambda x, w, b: T.conv_transpose2d(x, w, b, stride_f=2, pad_f=1),
           (2, 4, 4, 4), (4, 3, 2, 3), (3,))
    simple("irdft", lambda re, im: T.irdft(re, im, 16), (3, 9), (3, 9))
    simple("overlap_add", lambda f: T.overlap_add(f, 3, 14), (3, 4))
    return checks


def loss_checks(rng) -> dict[str, Callable[[], float]]:
    checks: dict[str, Callable[[], float]] = {}

    def sisdr_check():
        est = _rand(rng, 40)
        ref = _const(rng, 40)
        return T.check_gradient(lambda: L.sisdr_loss(est, ref), [est], h=H_FD, tol=TOL)
    checks["loss_sisdr"] = sisdr_check

    def embed_check():
        a = _rand(rng, 6, 8)
        b = _const(rng, 6, 8)
        return T.check_gradient(lambda: L.loss_distill_embed(a, b), [a], h=H_FD, tol=TOL)
    checks["loss_distill_embed"] = embed_check

    def adv_check():
        disc = L.Discriminator(8, width=6, seed=7, dtype=np.float64)
        ep = _rand(rng, 10, 8)
        te = _const(rng, 10, 8)
        worst = T.check_gradient(lambda: L.loss_adversarial(ep, te, disc)[0], [ep],
                                 h=H_FD, tol=TOL)
        dparams = list(disc.params().values())
        worst = max(worst, T.check_gradient(lambda: L.loss_adversarial(ep, te, disc)[1],
                                            dparams, h=H_FD, tol=TOL))
        return worst
    checks["loss_adversarial"] = adv_check

    def triplet_check():
        a = _rand(rng, 5, 8)
        p = _rand(rng, 5, 8)
        n = _rand(rng, 5, 8)
        return T.check_gradient(lambda: L.loss_triplet(a, p, n, 2.0), [a, p, n],
                                h=H_FD, tol=TOL)
    checks["loss_triplet"] = triplet_check

    def output_check():
        teach = SyntheticTeacher(bins=9, seed=5, dtype=np.float64)
        er = _rand(rng, 6, 9)
        ei = _rand(rng, 6, 9)
        rr = _const(rng, 6, 9)
        ri = _const(rng, 6, 9)
        return T.check_gradient(
            lambda: L.loss_distill_output((er, ei), (rr, ri), teach.embed_tensor),
            [er, ei], h=H_FD, tol=TOL)
    checks["loss_distill_output"] = output_check

    def cosine_distance_check():
        from .training import _encoder_distance
        a = _rand(rng, 5, 8)
        b = _const(rng, 5, 8)
        worst = 0.0
        for kind in ("l1", "l2", "cosine"):
            worst = max(worst, T.check_gradient(
                lambda: _encoder_distance(kind, a, b), [a], h=H_FD, tol=TOL))
        return worst
    checks["loss_pretrain_distances"] = cosine_distance_check

    return checks


def composed_model_check(rng, probes: int = 12) -> float:
    """FD on a random subset of parameters of a micro model, through the
    full forward + iSTFT + SI-SDR pipeline on a 4-frame input."""
    cfg = preset("micro")
    model = Gcrn(cfg, seed=3, dtype=np.float64)
    stft_cfg = StftConfig(window_len=24, hop=16, fft_size=32)
    re = T.Tensor(rng.normal(size=(1, 4, cfg.bins)), dtype=np.float64)
    im = T.Tensor(rng.normal(size=(1, 4, cfg.bins)), dtype=np.float64)
    ref = T.Tensor(rng.normal(size=(1, 3 * 16 + 24)), dtype=np.float64)

    def loss_fn():
        orr, oi = model.forward(re, im)
        est = istft_tensor(orr, oi, stft_cfg)
        return L.batch_sisdr_loss(est, ref)

    params = model.params()
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for k, p in params.items()}
    names = sorted(params)
    worst = 0.0
    for _ in range(probes):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        flat_idx = int(rng.integers(p.size))
        flat = p.data.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + H_FD
        with T.no_grad():
            fp = loss_fn().item()
        flat[flat_idx] = orig - H_FD
        with T.no_grad():
            fm = loss_fn().item()
        flat[flat_idx] = orig
        num = (fp - fm) / (2 * H_FD)
        ana = grads[name].reshape(-1)[flat_idx]
        rel = abs(ana - num) / max(abs(ana), abs(num), 1.0)
        worst = max(worst, rel)
    if worst > TOL:
        raise AssertionError(f"composed model gradient check failed: {worst:.3e}")
    return worst


def run_suite(verbose: bool = True, seed: int = 0) -> dict[str, float]:
    """Run everything; returns name -> worst relative error. Raises on failure."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    t0 = time.time()
    for name, fn in {**op_checks(rng), **loss_checks(rng)}.items():
        results[name] = fn()
        if verbose:
            print(f"  {name:<24s} rel err {results[name]:.2e}")
    results["composed_gcrn"] = composed_model_check(rng)
    if verbose:
        print(f"  {'composed_gcrn':<24s} rel err {results['composed_gcrn']:.2e}")
        print(f"gradient suite passed in {time.time() - t0:.1f}s "
              f"(worst {max(results.values()):.2e} < {TOL:.0e})")
    return results
