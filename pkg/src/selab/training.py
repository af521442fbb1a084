"""Training orchestration: every objective mode, both pre-training schemes,
and fine-tuning from pre-trained halves.

Modes with lambda = 0 skip the auxiliary term entirely, including teacher
materialization, so their update sequence is bit-identical to the baseline
under the same seed. Adversarial modes alternate one generator and one
discriminator Adam step per training step over disjoint parameter sets; the
discriminator graph is rebuilt on detached features after the generator
update since a tape is consumed by its backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses as L
from . import tensor as T
from .checkpoint import save_checkpoint
from .datapipe import DatasetIterator, MixItem
from .dsp import StftConfig, istft_tensor
from .gcrn import Gcrn, GcrnConfig
from .teacher import (EmbeddingSequence, LayerWeights, SyntheticTeacher,
                      align_frames, load_embeddings)

MODES = ("baseline", "concat", "concat_ws",
         "distill_embed", "distill_embed_ws", "distill_output",
         "distill_adv", "distill_adv_ws",
         "distill_triplet", "distill_triplet_ws")


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "baseline"
    steps: int = 1000
    batch: int = 4
    lr: float = 0.001
    seed: int = 0
    clip_norm: float = 5.0
    ckpt_every: int = 1000
    teacher_source: str = "synthetic"
    teacher_seed: int = 1234
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainError(f"unknown mode '{self.mode}' (have {MODES})")
        if self.teacher_source not in ("synthetic", "file"):
            raise TrainError(f"unknown teacher source '{self.teacher_source}'")


@dataclass
class PretrainConfig:
    target: str = "encoder"             # encoder | decoder
    encoder_loss: str = "l1"            # l1 | l2 | cosine
    decoder_input: str = "teacher"      # teacher | frozen_encoder
    encoder_ckpt: Optional[str] = None  # required for frozen_encoder
    steps: int = 2000
    batch: int = 4
    lr: float = 0.001
    seed: int = 0
    clip_norm: float = 5.0
    teacher_source: str = "synthetic"
    teacher_seed: int = 1234

    def __post_init__(self):
        if self.target not in ("encoder", "decoder"):
            raise TrainError(f"unknown pretrain target '{self.target}'")
        if self.encoder_loss not in ("l1", "l2", "cosine"):
            raise TrainError(f"unknown encoder loss '{self.encoder_loss}'")
        if self.decoder_input not in ("teacher", "frozen_encoder"):
            raise TrainError(f"unknown decoder input '{self.decoder_input}'")
        if self.target == "decoder" and self.decoder_input == "frozen_encoder" \
                and not self.encoder_ckpt:
            raise TrainError("decoder pre-training from a frozen encoder needs encoder_ckpt")
        if self.teacher_source not in ("synthetic", "file"):
            raise TrainError(f"unknown teacher source '{self.teacher_source}'")


def mode_lambda(mode: str, w: L.LossWeights) -> float:
    if mode.startswith("distill_embed"):
        return w.lambda_embed
    if mode.startswith("distill_adv"):
        return w.lambda_adv
    if mode.startswith("distill_triplet"):
        return w.lambda_triplet
    if mode == "distill_output":
        return w.lambda_output
    return 0.0


def mode_uses_ws(mode: str) -> bool:
    return mode.endswith("_ws")


def mode_needs_clean_teacher(mode: str, lam: float) -> bool:
    return lam > 0 and mode.startswith(("distill_embed", "distill_adv", "distill_triplet"))


def mode_needs_noisy_teacher(mode: str, lam: float) -> bool:
    if mode.startswith("concat"):
        return True
    return lam > 0 and mode.startswith("distill_triplet")


class MetricLog:
    """One UTF-8 line per step: step<TAB>key=value pairs."""

    def __init__(self, path: Optional[Path] = None):
        self.path = path
        self.lines: list[str] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")

    def record(self, step: int, **kv: float):
        line = f"{step}\t" + "\t".join(f"{k}={v:.6f}" for k, v in kv.items())
        self.lines.append(line)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def values(self, key: str) -> list[float]:
        out = []
        for line in self.lines:
            for part in line.split("\t")[1:]:
                k, _, v = part.partition("=")
                if k == key:
                    out.append(float(v))
        return out

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _batch_tensors(items: list[MixItem], dtype) -> dict[str, T.Tensor]:
    nr = np.stack([it.noisy_spec.real for it in items]).astype(dtype)
    ni = np.stack([it.noisy_spec.imag for it in items]).astype(dtype)
    cr = np.stack([it.clean_spec.real for it in items]).astype(dtype)
    ci = np.stack([it.clean_spec.imag for it in items]).astype(dtype)
    cw = np.stack([it.clean_wave.samples for it in items]).astype(dtype)
    return {"nr": T.Tensor(nr), "ni": T.Tensor(ni),
            "cr": T.Tensor(cr), "ci": T.Tensor(ci), "cw": T.Tensor(cw)}


class TeacherProvider:
    """Uniform access to per-item teacher features for both sources.

    Synthetic: a frozen differentiable conv stack evaluated on the fly.
    File: SEB1 sequences referenced from the manifest's optional columns.
    Views are (B, T, D); the ws view mixes all layers with learned logits.
    """

    def __init__(self, source: str, mode: str, lam: float, seed: int,
                 bins: int, dtype, items_probe: list[MixItem]):
        self.source = source
        self.dtype = dtype
        self.use_ws = mode_uses_ws(mode)
        self.synth: Optional[SyntheticTeacher] = None
        self.layer_weights: Optional[LayerWeights] = None
        self._cache: dict[str, EmbeddingSequence] = {}
        if source == "synthetic":
            self.synth = SyntheticTeacher(bins=bins, seed=seed, dtype=dtype)
            self.dim = SyntheticTeacher.DIM
            n_layers = SyntheticTeacher.LAYERS
        else:
            if mode == "distill_output":
                raise TrainError(
                    "output distillation needs a differentiable teacher; file-based "
                    "embeddings cannot propagate gradients (use teacher_source=synthetic)")
            need_clean = mode_needs_clean_teacher(mode, lam)
            need_noisy = mode_needs_noisy_teacher(mode, lam)
            probe_path = None
            for it in items_probe:
                if need_clean and not it.clean_emb:
                    raise TrainError(f"mode '{mode}' needs clean embedding files; "
                                     f"record {it.index} has none (manifest column 4)")
                if need_noisy and not it.noisy_emb:
                    raise TrainError(f"mode '{mode}' needs noisy embedding files; "
                                     f"record {it.index} has none (manifest column 5)")
                probe_path = probe_path or it.clean_emb or it.noisy_emb
            if probe_path is None:
                raise TrainError("file teacher source but the manifest names no embedding files")
            probe = load_embeddings(probe_path)
            self.dim = probe.dim
            n_layers = probe.layers
        if self.use_ws:
            self.layer_weights = LayerWeights(n_layers, dtype=dtype)

    def aux_params(self) -> dict[str, T.Tensor]:
        if self.layer_weights is not None:
            return {"aux.layer_logits": self.layer_weights.logits}
        return {}

    def _file_view(self, path: str, frames: int) -> T.Tensor:
        if path not in self._cache:
            self._cache[path] = load_embeddings(path)
        e = self._cache[path]
        m = align_frames(e.frames, frames)
        if self.use_ws:
            mixed = T.mix_layers(self.layer_weights.weights(),
                                 T.Tensor(e.data.astype(self.dtype)))
            return T.narrow(mixed, 0, 0, m)
        return T.Tensor(e.data[-1][:m].astype(self.dtype))

    def _synth_view(self, real: T.Tensor, imag: T.Tensor) -> T.Tensor:
        acts = self.synth.layers_tensor(real, imag)
        if self.use_ws:
            stacked = T.concat([T.reshape(a, (1,) + a.shape) for a in acts], axis=0)
            return T.mix_layers(self.layer_weights.weights(), stacked)
        return acts[-1]

    def clean_batch(self, items: list[MixItem], batch: dict) -> T.Tensor:
        if self.source == "synthetic":
            return self._synth_view(batch["cr"].detach(), batch["ci"].detach())
        views = [self._file_view(it.clean_emb, it.noisy_spec.frames) for it in items]
        return T.concat([T.reshape(v, (1,) + v.shape) for v in views], axis=0)

    def noisy_batch(self, items: list[MixItem], batch: dict) -> T.Tensor:
        if self.source == "synthetic":
            return self._synth_view(batch["nr"].detach(), batch["ni"].detach())
        views = [self._file_view(it.noisy_emb, it.noisy_spec.frames) for it in items]
        return T.concat([T.reshape(v, (1,) + v.shape) for v in views], axis=0)

    def output_embed(self, real: T.Tensor, imag: T.Tensor) -> T.Tensor:
        """Differentiable last-layer teacher features of a predicted spectrogram."""
        return self.synth.embed_tensor(real, imag)


def build_model_for_mode(base: GcrnConfig, mode: str, teacher_dim: int,
                         seed: int, dtype=np.float32) -> Gcrn:
    """Concat modes need the conditioning projection built in."""
    if mode.startswith("concat"):
        cfg = replace(base, cond_mode="concat", cond_dim=teacher_dim)
    else:
        cfg = replace(base, cond_mode="none", cond_dim=0)
    return Gcrn(cfg, seed=seed, dtype=dtype)


class Trainer:
    def __init__(self, model: Gcrn, cfg: TrainConfig, data: DatasetIterator,
                 stft_cfg: StftConfig = StftConfig(),
                 run_dir: Optional[Path] = None):
        self.model = model
        self.cfg = cfg
        self.data = data
        self.stft_cfg = stft_cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.lam = mode_lambda(cfg.mode, cfg.weights)
        self.dtype = model.dtype

        items_probe = data.items() if cfg.teacher_source == "file" else []
        needs_teacher = cfg.mode.startswith("concat") or self.lam > 0
        self.teacher = TeacherProvider(
            cfg.teacher_source, cfg.mode, self.lam, cfg.teacher_seed,
            model.cfg.bins, self.dtype, items_probe) if needs_teacher else None

        rng = np.random.default_rng((cfg.seed, 202))
        self.proj_w = self.proj_b = None
        if self.lam > 0 and cfg.mode.startswith(("distill_embed", "distill_adv", "distill_triplet")):
            H, D = model.cfg.lstm_hidden, self.teacher.dim
            limit = np.sqrt(6.0 / (H + D))
            self.proj_w = T.Tensor(rng.uniform(-limit, limit, size=(H, D)),
                                   requires_grad=True, dtype=self.dtype)
            self.proj_b = T.Tensor(np.zeros(D), requires_grad=True, dtype=self.dtype)

        self.disc = None
        if self.lam > 0 and cfg.mode.startswith("distill_adv"):
            self.disc = L.Discriminator(self.teacher.dim, seed=cfg.seed, dtype=self.dtype)

        self.gen_params = dict(model.params())
        if self.proj_w is not None:
            self.gen_params["aux.proj.w"] = self.proj_w
            self.gen_params["aux.proj.b"] = self.proj_b
        if self.teacher is not None:
            self.gen_params.update(self.teacher.aux_params())
        self.gen_state = T.AdamState(lr=cfg.lr)
        self.disc_state = T.AdamState(lr=cfg.lr) if self.disc is not None else None

    # -- one batch: generator-side loss plus raw features for the critic step --

    def _forward_loss(self, items: list[MixItem], batch: dict):
        cfg = self.cfg
        cond = None
        if cfg.mode.startswith("concat"):
            cond = self.teacher.noisy_batch(items, batch)
        out_r, out_i = self.model.forward(batch["nr"], batch["ni"], cond=cond)
        m = out_r.shape[1]
        est = istft_tensor(out_r, out_i, self.stft_cfg)
        ref = T.narrow(batch["cw"], 1, 0, est.shape[-1])
        sis_loss = L.batch_sisdr_loss(est, ref)
        aux = None
        disc_feats = None
        if self.lam > 0:
            if cfg.mode == "distill_output":
                aux = L.loss_distill_output(
                    (out_r, out_i),
                    (T.narrow(batch["cr"], 1, 0, m), T.narrow(batch["ci"], 1, 0, m)),
                    self.teacher.output_embed)
            else:
                enc, _ = self.model.encode(batch["nr"], batch["ni"])
                enc_proj = T.bias_add(T.matmul(enc, self.proj_w), self.proj_b)
                t_clean = self.teacher.clean_batch(items, batch)
                mt = min(enc_proj.shape[1], t_clean.shape[1])
                enc_proj = T.narrow(enc_proj, 1, 0, mt)
                t_clean = T.narrow(t_clean, 1, 0, mt)
                if cfg.mode.startswith("distill_embed"):
                    aux = L.loss_distill_embed(enc_proj, t_clean)
                elif cfg.mode.startswith("distill_triplet"):
                    t_noisy = T.narrow(self.teacher.noisy_batch(items, batch), 1, 0, mt)
                    aux = L.loss_triplet(enc_proj, t_clean, t_noisy, cfg.weights.margin)
                elif cfg.mode.startswith("distill_adv"):
                    gen_terms = []
                    disc_feats = []
                    for b in range(enc_proj.shape[0]):
                        ep = T.reshape(T.narrow(enc_proj, 0, b, 1), enc_proj.shape[1:])
                        fake = self.disc.scores(ep)
                        gen_terms.append(T.mean_(T.mul(T.sub(fake, 1.0), T.sub(fake, 1.0))))
                        disc_feats.append((ep.data.copy(),
                                           t_clean.data[b].copy()))
                    aux = _mean_of(gen_terms)
        total = sis_loss if aux is None else T.add(sis_loss, T.mul(aux, self.lam))
        return total, sis_loss, aux, disc_feats

    def _disc_step(self, disc_feats) -> float:
        """Critic update on detached features, its own tape."""
        terms = []
        for fake_np, real_np in disc_feats:
            fake = self.disc.scores(T.Tensor(fake_np))
            real = self.disc.scores(T.Tensor(real_np))
            terms.append(T.add(
                T.mul(T.mean_(T.mul(fake, fake)), 0.5),
                T.mul(T.mean_(T.mul(T.sub(real, 1.0), T.sub(real, 1.0))), 0.5)))
        disc_loss = _mean_of(terms)
        val = disc_loss.item()
        T.backward(disc_loss)
        T.clip_grad_norm(self.disc.params().values(), self.cfg.clip_norm)
        T.adam_step(self.disc.params(), self.disc_state)
        return val

    def _save(self, path: Path):
        tensors = {k: v.data for k, v in self.gen_params.items()}
        if self.disc is not None:
            tensors.update({k: v.data for k, v in self.disc.params().items()})
        save_checkpoint(path, tensors)
        with open(str(path) + ".cfg", "w") as f:
            f.write(self.model.cfg.to_text())

    def train(self, log: Optional[MetricLog] = None) -> Path:
        cfg = self.cfg
        if log is None:
            log = MetricLog(self.run_dir / "metrics.log" if self.run_dir else None)
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        final = (self.run_dir / "final.gck") if self.run_dir else Path("final.gck")
        batches = self.data.batches(cfg.batch)
        for step in range(1, cfg.steps + 1):
            items = next(batches)
            batch = _batch_tensors(items, self.dtype)
            total, sis, aux, disc_feats = self._forward_loss(items, batch)
            if not math.isfinite(total.item()):
                log.close()
                if self.run_dir:
                    self._save(self.run_dir / "last_good.gck")
                raise TrainError(f"non-finite loss at step {step}; last-good checkpoint saved")
            T.backward(total)
            if self.disc is not None:
                # the generator term D(fake) leaves gradients on the critic;
                # they belong to the critic's own step, so drop them here
                for p in self.disc.params().values():
                    p.zero_grad()
            T.clip_grad_norm(self.gen_params.values(), cfg.clip_norm)
            T.adam_step(self.gen_params, self.gen_state)
            extra = {}
            if disc_feats is not None:
                extra["disc"] = self._disc_step(disc_feats)
            log.record(step, loss=total.item(), sisdr=-sis.item(),
                       aux=aux.item() if aux is not None else 0.0, **extra)
            if self.run_dir and cfg.ckpt_every > 0 and step % cfg.ckpt_every == 0:
                self._save(self.run_dir / f"step{step}.gck")
        if self.run_dir:
            self._save(final)
            if self.teacher is not None and self.teacher.layer_weights is not None:
                w = self.teacher.layer_weights.weights().data
                (self.run_dir / "layer_weights.txt").write_text(
                    ",".join(f"{x:.6f}" for x in w) + "\n")
        log.close()
        return final


def _mean_of(terms: list[T.Tensor]) -> T.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

def _encoder_distance(kind: str, pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    if kind == "l1":
        return T.mean_(T.abs_(T.sub(pred, target)))
    if kind == "l2":
        diff = T.sub(pred, target)
        return T.mean_(T.mul(diff, diff))
    cos = T.cosine_similarity(pred, target)
    return T.mean_(T.add(T.neg(cos), 1.0))


class PretrainTeacher:
    """Last-layer clean-speech targets from either teacher source."""

    def __init__(self, cfg: PretrainConfig, bins: int, dtype,
                 items_probe: list[MixItem]):
        self.source = cfg.teacher_source
        self.dtype = dtype
        if self.source == "synthetic":
            self.synth = SyntheticTeacher(bins=bins, seed=cfg.teacher_seed, dtype=dtype)
            self.dim = SyntheticTeacher.DIM
        else:
            for it in items_probe:
                if not it.clean_emb:
                    raise TrainError(f"pre-training with file teacher needs clean embedding "
                                     f"files; record {it.index} has none")
            probe = load_embeddings(items_probe[0].clean_emb)
            self.dim = probe.dim
            self._cache: dict[str, EmbeddingSequence] = {}

    def clean(self, items: list[MixItem], batch: dict) -> np.ndarray:
        if self.source == "synthetic":
            with T.no_grad():
                out = self.synth.embed_tensor(batch["cr"], batch["ci"])
            return out.data
        rows = []
        frames = items[0].noisy_spec.frames
        for it in items:
            if it.clean_emb not in self._cache:
                self._cache[it.clean_emb] = load_embeddings(it.clean_emb)
            e = self._cache[it.clean_emb]
            m = align_frames(e.frames, frames)
            row = e.data[-1][:m]
            if m < frames:  # pad the odd off-by-one with the last frame
                row = np.concatenate([row, row[-1:]], axis=0)
            rows.append(row)
        return np.stack(rows).astype(self.dtype)


class EncoderPretrainer:
    """Predict teacher features of clean speech from the noisy spectrogram."""

    def __init__(self, model: Gcrn, cfg: PretrainConfig, data: DatasetIterator,
                 run_dir: Optional[Path] = None):
        self.model = model
        self.cfg = cfg
        self.data = data
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.dtype = model.dtype
        probe = data.items() if cfg.teacher_source == "file" else []
        self.teacher = PretrainTeacher(cfg, model.cfg.bins, self.dtype, probe)
        rng = np.random.default_rng((cfg.seed, 202))
        H, D = model.cfg.lstm_hidden, self.teacher.dim
        limit = np.sqrt(6.0 / (H + D))
        self.proj_w = T.Tensor(rng.uniform(-limit, limit, size=(H, D)),
                               requires_grad=True, dtype=self.dtype)
        self.proj_b = T.Tensor(np.zeros(D), requires_grad=True, dtype=self.dtype)
        self.params = dict(model.encoder_params())
        self.params["pre.proj.w"] = self.proj_w
        self.params["pre.proj.b"] = self.proj_b
        self.state = T.AdamState(lr=cfg.lr)

    def train(self, log: Optional[MetricLog] = None) -> Path:
        cfg = self.cfg
        if log is None:
            log = MetricLog(self.run_dir / "metrics.log" if self.run_dir else None)
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        batches = self.data.batches(cfg.batch)
        for step in range(1, cfg.steps + 1):
            items = next(batches)
            batch = _batch_tensors(items, self.dtype)
            enc, _ = self.model.encode(batch["nr"], batch["ni"])
            pred = T.bias_add(T.matmul(enc, self.proj_w), self.proj_b)
            target = self.teacher.clean(items, batch)
            mt = min(pred.shape[1], target.shape[1])
            loss = _encoder_distance(cfg.encoder_loss,
                                     T.narrow(pred, 1, 0, mt),
                                     T.Tensor(target[:, :mt]))
            if not math.isfinite(loss.item()):
                raise TrainError(f"non-finite encoder pre-training loss at step {step}")
            T.backward(loss)
            T.clip_grad_norm(self.params.values(), cfg.clip_norm)
            T.adam_step(self.params, self.state)
            log.record(step, loss=loss.item())
        path = (self.run_dir / "encoder.gck") if self.run_dir else Path("encoder.gck")
        save_checkpoint(path, {k: v.data for k, v in self.params.items()})
        with open(str(path) + ".cfg", "w") as f:
            f.write(self.model.cfg.to_text())
        log.close()
        return path


class DecoderPretrainer:
    """Reconstruct clean speech from teacher features (or a frozen encoder),
    with encoder residues replaced by local x2 frequency duplication."""

    def __init__(self, model: Gcrn, cfg: PretrainConfig, data: DatasetIterator,
                 stft_cfg: StftConfig = StftConfig(), run_dir: Optional[Path] = None):
        self.model = model
        self.cfg = cfg
        self.data = data
        self.stft_cfg = stft_cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.dtype = model.dtype
        self.params = dict(model.decoder_params())
        self.in_proj_w = self.in_proj_b = None
        if cfg.decoder_input == "teacher":
            probe = data.items() if cfg.teacher_source == "file" else []
            self.teacher = PretrainTeacher(cfg, model.cfg.bins, self.dtype, probe)
            rng = np.random.default_rng((cfg.seed, 404))
            D, H = self.teacher.dim, model.cfg.lstm_hidden
            limit = np.sqrt(6.0 / (D + H))
            self.in_proj_w = T.Tensor(rng.uniform(-limit, limit, size=(D, H)),
                                      requires_grad=True, dtype=self.dtype)
            self.in_proj_b = T.Tensor(np.zeros(H), requires_grad=True, dtype=self.dtype)
            self.params["pre.inproj.w"] = self.in_proj_w
            self.params["pre.inproj.b"] = self.in_proj_b
        else:
            self.teacher = None
            self.model.load(cfg.encoder_ckpt, subset="enc.")
            for p in self.model.encoder_params().values():
                p.requires_grad = False
        self.state = T.AdamState(lr=cfg.lr)

    def _bottleneck(self, items: list[MixItem], batch: dict) -> T.Tensor:
        if self.cfg.decoder_input == "teacher":
            emb = self.teacher.clean(items, batch)
            return T.linear(T.Tensor(emb), self.in_proj_w, self.in_proj_b)
        enc, _ = self.model.encode(batch["nr"], batch["ni"])
        return enc

    def train(self, log: Optional[MetricLog] = None) -> Path:
        cfg = self.cfg
        if log is None:
            log = MetricLog(self.run_dir / "metrics.log" if self.run_dir else None)
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        batches = self.data.batches(cfg.batch)
        for step in range(1, cfg.steps + 1):
            items = next(batches)
            batch = _batch_tensors(items, self.dtype)
            bottleneck = self._bottleneck(items, batch)
            out_r, out_i = self.model.decode(bottleneck, None, dup_skips=True)
            est = istft_tensor(out_r, out_i, self.stft_cfg)
            nw = min(est.shape[-1], batch["cw"].shape[-1])
            loss = L.batch_sisdr_loss(T.narrow(est, 1, 0, nw),
                                      T.narrow(batch["cw"], 1, 0, nw))
            if not math.isfinite(loss.item()):
                raise TrainError(f"non-finite decoder pre-training loss at step {step}")
            T.backward(loss)
            T.clip_grad_norm(self.params.values(), cfg.clip_norm)
            T.adam_step(self.params, self.state)
            log.record(step, loss=loss.item())
        path = (self.run_dir / "decoder.gck") if self.run_dir else Path("decoder.gck")
        save_checkpoint(path, {k: v.data for k, v in self.params.items()})
        with open(str(path) + ".cfg", "w") as f:
            f.write(self.model.cfg.to_text())
        log.close()
        return path


def finetune(model: Gcrn, encoder_ckpt, decoder_ckpt, cfg: TrainConfig,
             data: DatasetIterator, stft_cfg: StftConfig = StftConfig(),
             run_dir: Optional[Path] = None) -> Path:
    """Load pre-trained halves, then continue with the baseline objective."""
    model.load(encoder_ckpt, subset="enc.")
    model.load(decoder_ckpt, subset="dec.")
    for p in model.params().values():
        p.requires_grad = True
    trainer = Trainer(model, replace(cfg, mode="baseline"), data,
                      stft_cfg=stft_cfg, run_dir=run_dir)
    return trainer.train()


# ---------------------------------------------------------------------------
# Inference helper shared by eval and tests
# ---------------------------------------------------------------------------

def enhance_item(model: Gcrn, item: MixItem, stft_cfg: StftConfig = StftConfig(),
                 teacher: Optional[TeacherProvider] = None) -> np.ndarray:
    """Run the model on one noisy item, return the enhanced waveform."""
    with T.no_grad():
        batch = _batch_tensors([item], model.dtype)
        cond = None
        if model.cfg.cond_mode == "concat":
            if teacher is None:
                raise TrainError("this checkpoint requires teacher conditioning at inference "
                                 "(constraint-violating mode); provide a teacher source")
            cond = teacher.noisy_batch([item], batch)
        out_r, out_i = model.forward(batch["nr"], batch["ni"], cond=cond)
        est = istft_tensor(out_r, out_i, stft_cfg)
    return np.asarray(est.data[0], dtype=np.float64)
