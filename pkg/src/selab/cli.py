"""se-lab: one entry point for mixing, training, evaluation and analysis."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import losses as L
from .analysis import export_spectrogram, lag_correlation, lag_euclidean, stats_tsv
from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig
from .datapipe import DatasetIterator, MixManifest
from .dsp import StftConfig, Waveform, read_wav, write_wav
from .gcrn import Gcrn, GcrnConfig, preset
from .metrics import EvalReport, eval_sisdr, eval_stoi
from .teacher import load_embeddings
from .training import (DecoderPretrainer, EncoderPretrainer, MetricLog,
                       PretrainConfig, TeacherProvider, TrainConfig, Trainer,
                       build_model_for_mode, enhance_item, finetune,
                       mode_lambda)


def _stft_cfg(cfg: RunConfig) -> StftConfig:
    return StftConfig(window_len=cfg["stft.window_len"], hop=cfg["stft.hop"],
                      fft_size=cfg["stft.fft_size"])


def _model_cfg(cfg: RunConfig) -> GcrnConfig:
    overrides = {}
    if cfg["model.channels"]:
        overrides["channels"] = tuple(int(c) for c in cfg["model.channels"].split(","))
    for key, name in (("model.kernel_t", "kernel_t"), ("model.kernel_f", "kernel_f"),
                      ("model.stride_f", "stride_f"), ("model.lstm_hidden", "lstm_hidden"),
                      ("model.lstm_groups", "lstm_groups"), ("model.proj_dim", "proj_dim")):
        if cfg[key]:
            overrides[name] = cfg[key]
    overrides["bins"] = cfg["stft.fft_size"] // 2 + 1
    return preset(cfg["model.preset"], **overrides)


def _weights(cfg: RunConfig) -> L.LossWeights:
    return L.LossWeights(
        lambda_embed=cfg["losses.lambda.embed"],
        lambda_adv=cfg["losses.lambda.adv"],
        lambda_triplet=cfg["losses.lambda.triplet"],
        lambda_output=cfg["losses.lambda.output"],
        margin=cfg["losses.margin"])


def _data(cfg: RunConfig, manifest_key: str = "data.manifest") -> DatasetIterator:
    path = cfg[manifest_key]
    if not path:
        raise ConfigError(f"{manifest_key} is required")
    return DatasetIterator(MixManifest.load(path), cfg=_stft_cfg(cfg),
                           crop=cfg["data.crop"], seed=cfg["train.seed"],
                           peak=cfg["data.peak"])


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        k, _, v = item.partition("=")
        cfg.set(k.strip(), v.strip())
    # dedicated flags override file values and --set pairs
    for flag, key in (("manifest", "data.manifest"), ("mode", "train.mode"),
                      ("steps", "train.steps"), ("batch", "data.batch"),
                      ("lr", "train.lr"), ("preset", "model.preset"),
                      ("ckpt", "eval.ckpt"), ("teacher", "teacher.source")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.set(key, v)
    if getattr(args, "seed", None) is not None:
        cfg.set("train.seed", args.seed)
    return cfg


def _teacher_dim(cfg: RunConfig, data: DatasetIterator) -> int:
    if cfg["teacher.source"] == "synthetic":
        from .teacher import SyntheticTeacher
        return SyntheticTeacher.DIM
    for rec in data.manifest.records:
        path = rec.noisy_emb or rec.clean_emb
        if path:
            return load_embeddings(path).dim
    raise ConfigError("file teacher source but the manifest names no embedding files")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_mix(args) -> int:
    cfg = _load_config(args)
    data = _data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for item in data.items():
        stem = f"{item.index:04d}_{item.clean_id}"
        write_wav(out / f"{stem}_noisy.wav", item.noisy_wave)
        if args.with_clean:
            write_wav(out / f"{stem}_clean.wav", item.clean_wave)
    print(f"wrote {len(data.manifest.records)} noisy files to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.out)
    cfg.echo(run_dir)
    data = _data(cfg)
    tdim = _teacher_dim(cfg, data)
    model = build_model_for_mode(_model_cfg(cfg), cfg["train.mode"], tdim,
                                 seed=cfg["train.seed"])
    tcfg = TrainConfig(
        mode=cfg["train.mode"], steps=cfg["train.steps"], batch=cfg["data.batch"],
        lr=cfg["train.lr"], seed=cfg["train.seed"], clip_norm=cfg["train.clip_norm"],
        ckpt_every=cfg["train.ckpt_every"], teacher_source=cfg["teacher.source"],
        teacher_seed=cfg["teacher.seed"], weights=_weights(cfg))
    trainer = Trainer(model, tcfg, data, stft_cfg=_stft_cfg(cfg), run_dir=run_dir)
    final = trainer.train()
    print(f"final checkpoint: {final} ({model.param_count()} inference parameters)")
    return 0


def _pretrain_common(args, target: str) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.out)
    cfg.echo(run_dir)
    data = _data(cfg)
    model = Gcrn(_model_cfg(cfg), seed=cfg["train.seed"])
    pcfg = PretrainConfig(
        target=target, encoder_loss=args.loss or cfg["pretrain.encoder_loss"],
        decoder_input=getattr(args, "decoder_input", None) or cfg["pretrain.decoder_input"],
        encoder_ckpt=getattr(args, "encoder_ckpt", None) or cfg["pretrain.encoder_ckpt"] or None,
        steps=cfg["train.steps"], batch=cfg["data.batch"], lr=cfg["train.lr"],
        seed=cfg["train.seed"], clip_norm=cfg["train.clip_norm"],
        teacher_source=cfg["teacher.source"], teacher_seed=cfg["teacher.seed"])
    if target == "encoder":
        worker = EncoderPretrainer(model, pcfg, data, run_dir=run_dir)
    else:
        worker = DecoderPretrainer(model, pcfg, data, stft_cfg=_stft_cfg(cfg),
                                   run_dir=run_dir)
    path = worker.train()
    print(f"pre-trained {target} checkpoint: {path}")
    return 0


def cmd_pretrain_encoder(args) -> int:
    return _pretrain_common(args, "encoder")


def cmd_pretrain_decoder(args) -> int:
    return _pretrain_common(args, "decoder")


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.out)
    cfg.echo(run_dir)
    data = _data(cfg)
    model = Gcrn(_model_cfg(cfg), seed=cfg["train.seed"])
    tcfg = TrainConfig(
        mode="baseline", steps=cfg["train.steps"], batch=cfg["data.batch"],
        lr=cfg["train.lr"], seed=cfg["train.seed"], clip_norm=cfg["train.clip_norm"],
        ckpt_every=cfg["train.ckpt_every"], weights=_weights(cfg))
    final = finetune(model, args.encoder_ckpt, args.decoder_ckpt, tcfg, data,
                     stft_cfg=_stft_cfg(cfg), run_dir=run_dir)
    print(f"fine-tuned checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.manifest:
        cfg.set("eval.manifest", args.manifest)
    manifest_key = "eval.manifest" if cfg["eval.manifest"] else "data.manifest"
    data = _data(cfg, manifest_key)
    stft_cfg = _stft_cfg(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = None
    teacher = None
    ckpt = cfg["eval.ckpt"]
    if ckpt:
        mcfg = GcrnConfig.from_text(Path(str(ckpt) + ".cfg").read_text())
        model = Gcrn(mcfg, seed=0)
        model.load(ckpt)
        if mcfg.cond_mode == "concat":
            if args.no_teacher:
                raise ConfigError(
                    "checkpoint was trained with feature concatenation and cannot run "
                    "without its teacher (constraint-violating mode)")
            teacher = TeacherProvider(cfg["teacher.source"], "concat", 0.0,
                                      cfg["teacher.seed"], mcfg.bins, model.dtype,
                                      data.items())
    report = EvalReport()
    for item in data.items():
        ref = item.clean_wave.samples
        if model is None:
            est = item.noisy_wave.samples
        else:
            est = enhance_item(model, item, stft_cfg, teacher=teacher)
            ref = ref[: len(est)]
        n = min(len(est), len(ref))
        report.add(item.clean_id, eval_sisdr(est[:n], ref[:n]), eval_stoi(est[:n], ref[:n]))
        if args.save_audio and model is not None:
            write_wav(out / f"enhanced_{item.index:04d}_{item.clean_id}.wav",
                      Waveform(est))
    (out / "report.tsv").write_text(report.to_tsv())
    if args.json or cfg["eval.json"]:
        import json
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    if not args.no_figures:
        from .report import render_eval_figure
        render_eval_figure(report, out / "report.png")
    agg = report.aggregates()
    print(report.to_tsv(), end="")
    print(f"mean SI-SDR {agg['mean_sisdr']:.2f} dB, mean STOI {agg['mean_stoi']:.3f}"
          f" over {len(report.rows)} utterances -> {out}/report.tsv")
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stft_cfg = _stft_cfg(_load_config(args))
    if args.spectrogram:
        from .report import render_spectrogram_figure
        for f in args.files:
            w = read_wav(f)
            stem = Path(f).stem
            mat = export_spectrogram(w, out / f"{stem}_spec.csv", stft_cfg)
            if not args.no_figures:
                render_spectrogram_figure(mat, out / f"{stem}_spec.png")
            print(f"{f}: {mat.shape[0]} x {mat.shape[1]} log-magnitude grid")
        return 0

    lags = [float(x) for x in args.lags.split(",")]
    pooled: dict[float, list[np.ndarray]] = {lag: [] for lag in lags}
    per_file_lines = []
    for f in args.files:
        e = load_embeddings(f)
        seq = e.data[-1]
        hop_ms = 1000.0 * e.hop_samples / e.sample_rate
        stats_f = []
        for lag in lags:
            if args.metric == "corr":
                samples, st = lag_correlation(seq, lag, hop_ms)
            else:
                samples, st = lag_euclidean(seq, lag, hop_ms, normalized=args.normalized)
            pooled[lag].append(samples)
            stats_f.append(st)
            if args.raw:
                np.savetxt(out / f"{Path(f).stem}_lag{lag:g}_{args.metric}.txt", samples)
        per_file_lines.append(f"# {f}\n" + stats_tsv(stats_f))
    from .analysis import LagStats
    metric_name = {"corr": "correlation", "l2": "euclidean"}[args.metric]
    if args.metric == "l2" and args.normalized:
        metric_name = "euclidean_norm"
    pooled_stats = [LagStats.from_samples(np.concatenate(pooled[lag]), lag, metric_name)
                    for lag in lags]
    text = stats_tsv(pooled_stats)
    (out / "lag_stats.tsv").write_text(text + "\n" + "\n".join(per_file_lines))
    if not args.no_figures:
        from .report import render_lag_figure
        render_lag_figure(pooled_stats, out / "lag_stats.png")
    print(text, end="")
    print(f"-> {out}/lag_stats.tsv ({len(args.files)} file(s) pooled)")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    run_suite(verbose=True, seed=args.seed or 0)
    return 0


def cmd_inspect(args) -> int:
    tensors = load_checkpoint(args.ckpt)
    total = 0
    for name, arr in tensors.items():
        total += arr.size
        print(f"{name:<28s} {str(arr.shape):<18s} {arr.size * 4} bytes")
    print(f"total: {len(tensors)} tensors, {total} parameters, "
          f"{Path(args.ckpt).stat().st_size} bytes on disk")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="se-lab",
                                description="causal speech enhancement lab")
    p.add_argument("--seed", type=int, default=None, help="global seed override")
    p.add_argument("--config", type=str, default=None, help="run config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("mix", help="materialize noisy WAVs from a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--with-clean", action="store_true")
    sp.set_defaults(fn=cmd_mix)

    sp = sub.add_parser("train", help="train an enhancement model")
    sp.add_argument("--manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--preset")
    sp.add_argument("--teacher")
    sp.set_defaults(fn=cmd_train)

    for name, fn in (("pretrain-encoder", cmd_pretrain_encoder),
                     ("pretrain-decoder", cmd_pretrain_decoder)):
        sp = sub.add_parser(name, help=f"{name.replace('-', ' ')} against the teacher")
        sp.add_argument("--manifest")
        sp.add_argument("--out", required=True)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--preset")
        sp.add_argument("--teacher")
        sp.add_argument("--loss", choices=("l1", "l2", "cosine"), default=None)
        if name == "pretrain-decoder":
            sp.add_argument("--decoder-input", dest="decoder_input",
                            choices=("teacher", "frozen_encoder"), default=None)
            sp.add_argument("--encoder-ckpt", dest="encoder_ckpt", default=None)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("finetune", help="continue training from pre-trained halves")
    sp.add_argument("--manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--encoder-ckpt", required=True)
    sp.add_argument("--decoder-ckpt", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--preset")
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="score a checkpoint (or the raw noisy mix)")
    sp.add_argument("--manifest")
    sp.add_argument("--ckpt")
    sp.add_argument("--out", required=True)
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--save-audio", action="store_true")
    sp.add_argument("--no-figures", action="store_true")
    sp.add_argument("--no-teacher", action="store_true",
                    help="assert the checkpoint runs without any teacher")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("analyze", help="lag statistics of embedding files, "
                                        "or spectrogram export of WAVs")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--lags", default="20,60,400,1000,2000")
    sp.add_argument("--metric", choices=("corr", "l2"), default="corr")
    sp.add_argument("--normalized", action="store_true",
                    help="normalize L2 distances by the mean frame norm")
    sp.add_argument("--raw", action="store_true", help="dump raw samples per lag")
    sp.add_argument("--spectrogram", action="store_true",
                    help="treat inputs as WAVs and export log-magnitude grids")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("inspect-checkpoint", help="list tensors in a GCK1 file")
    sp.add_argument("ckpt")
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, AssertionError) as e:
        print(f"se-lab: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
