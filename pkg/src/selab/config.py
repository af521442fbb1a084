"""Run configuration: a flat key-value document with dotted sections.

Files hold ``key = value`` lines (UTF-8, # comments); CLI flags override
file values. Unknown keys are rejected, and the fully materialized config
(every field explicit) is echoed into the run directory.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


# key -> (type, default)
SCHEMA: dict[str, tuple] = {
    "stft.window_len": (int, 400),
    "stft.hop": (int, 320),
    "stft.fft_size": (int, 512),

    "model.preset": (str, "default"),
    "model.channels": (str, ""),          # CSV override, empty = preset value
    "model.kernel_t": (int, 0),           # 0 = preset value
    "model.kernel_f": (int, 0),
    "model.stride_f": (int, 0),
    "model.lstm_hidden": (int, 0),
    "model.lstm_groups": (int, 0),
    "model.proj_dim": (int, 0),

    "data.manifest": (str, ""),
    "data.crop": (int, 16000),
    "data.batch": (int, 4),
    "data.peak": (float, 0.9),

    "train.mode": (str, "baseline"),
    "train.steps": (int, 1000),
    "train.lr": (float, 0.001),
    "train.seed": (int, 0),
    "train.clip_norm": (float, 5.0),
    "train.ckpt_every": (int, 1000),

    "losses.lambda.embed": (float, 1.0),
    "losses.lambda.adv": (float, 0.1),
    "losses.lambda.triplet": (float, 1.0),
    "losses.lambda.output": (float, 1.0),
    "losses.margin": (float, 100.0),

    "teacher.source": (str, "synthetic"),
    "teacher.seed": (int, 1234),

    "pretrain.target": (str, "encoder"),
    "pretrain.encoder_loss": (str, "l1"),
    "pretrain.decoder_input": (str, "teacher"),
    "pretrain.encoder_ckpt": (str, ""),
    "pretrain.steps": (int, 2000),

    "eval.manifest": (str, ""),
    "eval.ckpt": (str, ""),
    "eval.json": (str, ""),
    "eval.save_audio": (str, ""),
}


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: d for k, (_, d) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        typ, _ = SCHEMA[key]
        try:
            self.values[key] = typ(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {typ.__name__}") from e

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        return self.values[key]

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, _, v = line.partition("=")
            try:
                cfg.set(k.strip(), v.strip())
            except ConfigError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from e
        return cfg

    def to_text(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(SCHEMA)) + "\n"

    def echo(self, run_dir: Path):
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.echo").write_text(self.to_text())
        (run_dir / "seed").write_text(str(self.values["train.seed"]) + "\n")
