"""Causal gated convolutional recurrent network for complex spectral mapping.

Encoder: gated conv blocks that keep time resolution (stride 1, left-only
padding) and halve frequency, then the first grouped LSTM layer. Decoder:
the second grouped LSTM layer, a linear lift back to the conv feature map,
and mirrored gated transposed convs whose outputs receive the encoder
residues. The enhanced spectrogram is predicted directly as real/imag
channels. Splitting the two LSTM layers across encoder and decoder is what
lets pre-training treat the halves independently.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields as dc_fields
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint


class ModelError(ValueError):
    pass


@dataclass
class GcrnConfig:
    bins: int = 257
    in_channels: int = 2
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    kernel_t: int = 2
    kernel_f: int = 3
    stride_f: int = 2
    lstm_hidden: int = 512
    lstm_layers: int = 2
    lstm_groups: int = 2
    proj_dim: int = 64
    cond_mode: str = "none"
    cond_dim: int = 0
    # fixed gain on the input spectra; keeps the first gates out of
    # saturation for peak-normalized audio and is free under a
    # scale-invariant objective (constant, hence still causal)
    input_scale: float = 0.125

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.lstm_layers != 2:
            raise ModelError("the encoder/decoder split requires exactly 2 LSTM layers")
        if self.cond_mode not in ("none", "concat"):
            raise ModelError(f"unknown conditioning mode '{self.cond_mode}'")
        if self.cond_mode == "concat" and self.cond_dim <= 0:
            raise ModelError("concat conditioning requires cond_dim > 0")
        if self.lstm_hidden % self.lstm_groups != 0:
            raise ModelError("lstm_hidden must divide evenly into groups")
        pad = (self.kernel_f - 1) // 2
        f = self.bins
        for i, _ in enumerate(self.channels):
            if (f + 2 * pad - self.kernel_f) % self.stride_f != 0:
                raise ModelError(f"frequency size {f} at block {i} does not stride cleanly")
            f = (f + 2 * pad - self.kernel_f) // self.stride_f + 1
        for hi, lo in zip(self.channels[1:], self.channels[:-1]):
            if hi % lo != 0:
                raise ModelError("each channel width must divide the next (duplication residues)")

    @property
    def pad_f(self) -> int:
        return (self.kernel_f - 1) // 2

    def freq_sizes(self) -> list[int]:
        """Frequency extent entering each block, plus the bottleneck size."""
        sizes = [self.bins]
        for _ in self.channels:
            sizes.append((sizes[-1] + 2 * self.pad_f - self.kernel_f) // self.stride_f + 1)
        return sizes

    @property
    def bottleneck_dim(self) -> int:
        return self.channels[-1] * self.freq_sizes()[-1]

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GcrnConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        missing = set(f.name for f in dc_fields(cls)) - set(kv)
        if missing:
            raise ModelError(f"model config missing fields: {sorted(missing)}")
        return cls(
            bins=int(kv["bins"]),
            in_channels=int(kv["in_channels"]),
            channels=tuple(int(c) for c in kv["channels"].split(",")),
            kernel_t=int(kv["kernel_t"]),
            kernel_f=int(kv["kernel_f"]),
            stride_f=int(kv["stride_f"]),
            lstm_hidden=int(kv["lstm_hidden"]),
            lstm_layers=int(kv["lstm_layers"]),
            lstm_groups=int(kv["lstm_groups"]),
            proj_dim=int(kv["proj_dim"]),
            cond_mode=kv["cond_mode"],
            cond_dim=int(kv["cond_dim"]),
            input_scale=float(kv["input_scale"]),
        )


PRESETS = {
    "default": GcrnConfig(),
    "tiny": GcrnConfig(channels=(2, 4, 8, 16, 32), lstm_hidden=64, proj_dim=32),
    "micro": GcrnConfig(bins=17, channels=(2, 4), lstm_hidden=8, proj_dim=8),
}


def preset(name: str, **overrides) -> GcrnConfig:
    if name not in PRESETS:
        raise ModelError(f"unknown preset '{name}' (have {sorted(PRESETS)})")
    base = asdict(PRESETS[name])
    base.update(overrides)
    base["channels"] = tuple(base["channels"])
    return GcrnConfig(**base)


def grouped_lstm_param_count(input_dim: int, hidden: int, groups: int) -> int:
    """4*(D*H + H^2)/K + 4*H: each group runs on its own feature slice."""
    return 4 * (input_dim * hidden + hidden * hidden) // groups + 4 * hidden


# ---------------------------------------------------------------------------
# Parameter initialization helpers
# ---------------------------------------------------------------------------

def _xavier(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return T.Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, dtype=dtype)


class GroupedLstm:
    """Uni-directional LSTM split along the feature dimension into groups."""

    def __init__(self, input_dim: int, hidden: int, groups: int, rng, dtype, prefix: str):
        if input_dim % groups != 0 or hidden % groups != 0:
            raise ModelError(f"{prefix}: dims {input_dim}/{hidden} not divisible by {groups} groups")
        self.input_dim = input_dim
        self.hidden = hidden
        self.groups = groups
        self.prefix = prefix
        self.per_in = input_dim // groups
        self.per_h = hidden // groups
        k = 1.0 / np.sqrt(self.per_h)
        self.wx, self.wh, self.b = [], [], []
        for g in range(groups):
            self.wx.append(T.Tensor(rng.uniform(-k, k, size=(self.per_in, 4 * self.per_h)),
                                    requires_grad=True, dtype=dtype))
            self.wh.append(T.Tensor(rng.uniform(-k, k, size=(self.per_h, 4 * self.per_h)),
                                    requires_grad=True, dtype=dtype))
            bias = np.zeros(4 * self.per_h)
            bias[self.per_h:2 * self.per_h] = 1.0  # forget gate bias
            self.b.append(T.Tensor(bias, requires_grad=True, dtype=dtype))

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for g in range(self.groups):
            out[f"{self.prefix}.g{g}.wx"] = self.wx[g]
            out[f"{self.prefix}.g{g}.wh"] = self.wh[g]
            out[f"{self.prefix}.g{g}.b"] = self.b[g]
        return out

    def init_state(self, batch: int, dtype) -> list[tuple[T.Tensor, T.Tensor]]:
        z = lambda: T.Tensor(np.zeros((batch, self.per_h)), dtype=dtype)
        return [(z(), z()) for _ in range(self.groups)]

    def step(self, x_t: T.Tensor, state) -> tuple[T.Tensor, list]:
        """One time step: x_t (B, input_dim) -> (B, hidden), new state."""
        outs = []
        new_state = []
        for g in range(self.groups):
            xg = T.narrow(x_t, 1, g * self.per_in, self.per_in)
            h, c = state[g]
            gates = T.bias_add(T.add(T.matmul(xg, self.wx[g]), T.matmul(h, self.wh[g])), self.b[g])
            i = T.sigmoid(T.narrow(gates, 1, 0, self.per_h))
            f = T.sigmoid(T.narrow(gates, 1, self.per_h, self.per_h))
            gg = T.tanh(T.narrow(gates, 1, 2 * self.per_h, self.per_h))
            o = T.sigmoid(T.narrow(gates, 1, 3 * self.per_h, self.per_h))
            c = T.add(T.mul(f, c), T.mul(i, gg))
            h = T.mul(o, T.tanh(c))
            outs.append(h)
            new_state.append((h, c))
        return T.concat(outs, axis=1), new_state

    def forward(self, x: T.Tensor) -> T.Tensor:
        """x (B, T, input_dim) -> (B, T, hidden)."""
        B, Tn, _ = x.shape
        state = self.init_state(B, x.dtype)
        frames = []
        for t in range(Tn):
            xt = T.reshape(T.narrow(x, 1, t, 1), (B, self.input_dim))
            h, state = self.step(xt, state)
            frames.append(T.reshape(h, (B, 1, self.hidden)))
        return T.concat(frames, axis=1)


def _shuffle_groups(x: T.Tensor, groups: int) -> T.Tensor:
    """Interleave group features so the next grouped layer mixes them."""
    B, Tn, H = x.shape
    per = H // groups
    x = T.reshape(x, (B, Tn, groups, per))
    x = T.transpose_(x, (0, 1, 3, 2))
    return T.reshape(x, (B, Tn, H))


class Gcrn:
    """The enhancement model; all parameters live in one flat named dict."""

    def __init__(self, cfg: GcrnConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng((seed, 101))
        kt, kf = cfg.kernel_t, cfg.kernel_f
        chain = (cfg.in_channels,) + cfg.channels

        self.enc_w = []  # (gate and linear conv per block, plus frame norm)
        for i, (cin, cout) in enumerate(zip(chain[:-1], chain[1:])):
            fan_in, fan_out = cin * kt * kf, cout * kt * kf
            blk = {
                "a.w": _xavier(rng, (cout, cin, kt, kf), fan_in, fan_out, dtype),
                "a.b": T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
                "g.w": _xavier(rng, (cout, cin, kt, kf), fan_in, fan_out, dtype),
                "g.b": T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
                "n.g": T.Tensor(np.ones(cout), requires_grad=True, dtype=dtype),
                "n.b": T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
            }
            self.enc_w.append(blk)

        D = cfg.bottleneck_dim
        H = cfg.lstm_hidden
        self.lstm_enc = GroupedLstm(D, H, cfg.lstm_groups, rng, dtype, "enc.lstm")
        self.lstm_dec = GroupedLstm(H, H, cfg.lstm_groups, rng, dtype, "dec.lstm")
        self.dec_proj_w = _xavier(rng, (H, D), H, D, dtype)
        self.dec_proj_b = T.Tensor(np.zeros(D), requires_grad=True, dtype=dtype)

        self.dec_w = []  # mirrored transposed conv blocks, deepest first
        rev = list(zip(chain[1:], chain[:-1]))[::-1]  # (cin, cout) pairs
        for i, (cin, cout) in enumerate(rev):
            fan_in, fan_out = cin * kt * kf, cout * kt * kf
            gated = i < len(rev) - 1  # final lift to re/im is plain
            blk = {
                "a.w": _xavier(rng, (cin, cout, kt, kf), fan_in, fan_out, dtype),
                "a.b": T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
            }
            if not gated:
                # start the correction near zero so the initial output is the
                # identity map; the lift in forward() restores step size
                blk["a.w"].data *= cfg.input_scale
            if gated:
                blk["g.w"] = _xavier(rng, (cin, cout, kt, kf), fan_in, fan_out, dtype)
                blk["g.b"] = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
                blk["n.g"] = T.Tensor(np.ones(cout), requires_grad=True, dtype=dtype)
                blk["n.b"] = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
            self.dec_w.append(blk)

        if cfg.cond_mode == "concat":
            self.cond_w = _xavier(rng, (H + cfg.cond_dim, H), H + cfg.cond_dim, H, dtype)
            self.cond_b = T.Tensor(np.zeros(H), requires_grad=True, dtype=dtype)
        else:
            self.cond_w = self.cond_b = None

    # -- parameter access ----------------------------------------------------

    def params(self) -> dict[str, T.Tensor]:
        out = {}
        for i, blk in enumerate(self.enc_w):
            for k, v in blk.items():
                out[f"enc.block{i}.{k}"] = v
        out.update(self.lstm_enc.params())
        out.update(self.lstm_dec.params())
        out["dec.proj.w"] = self.dec_proj_w
        out["dec.proj.b"] = self.dec_proj_b
        for i, blk in enumerate(self.dec_w):
            for k, v in blk.items():
                out[f"dec.block{i}.{k}"] = v
        if self.cond_w is not None:
            out["cond.proj.w"] = self.cond_w
            out["cond.proj.b"] = self.cond_b
        return out

    def encoder_params(self) -> dict[str, T.Tensor]:
        out = {k: v for k, v in self.params().items() if k.startswith("enc.")}
        return out

    def decoder_params(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params().items() if k.startswith("dec.")}

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def save(self, path):
        save_checkpoint(path, {k: v.data for k, v in self.params().items()})
        with open(str(path) + ".cfg", "w") as f:
            f.write(self.cfg.to_text())

    def load(self, path, subset: Optional[str] = None):
        """Load named tensors; subset limits to a name prefix (e.g. 'enc.')."""
        stored = load_checkpoint(path)
        own = self.params()
        mismatched = []
        for name, p in own.items():
            if subset is not None and not name.startswith(subset):
                continue
            if name not in stored:
                mismatched.append(f"{name}: missing from checkpoint")
                continue
            if stored[name].shape != p.data.shape:
                mismatched.append(f"{name}: checkpoint {stored[name].shape} vs model {p.data.shape}")
        if mismatched:
            raise ModelError("incompatible checkpoint:\n  " + "\n  ".join(mismatched))
        for name, p in own.items():
            if subset is not None and not name.startswith(subset):
                continue
            p.data = stored[name].astype(self.dtype)

    # -- forward pieces --------------------------------------------------------

    def _glu_conv(self, x: T.Tensor, blk: dict) -> T.Tensor:
        a = T.conv2d(x, blk["a.w"], blk["a.b"], stride_f=self.cfg.stride_f, pad_f=self.cfg.pad_f)
        g = T.conv2d(x, blk["g.w"], blk["g.b"], stride_f=self.cfg.stride_f, pad_f=self.cfg.pad_f)
        glu = T.frame_norm(T.mul(a, T.sigmoid(g)), blk["n.g"], blk["n.b"])
        return T.elu(glu)

    def _glu_deconv(self, x: T.Tensor, blk: dict) -> T.Tensor:
        a = T.conv_transpose2d(x, blk["a.w"], blk["a.b"], stride_f=self.cfg.stride_f,
                               pad_f=self.cfg.pad_f, causal=True)
        if "g.w" not in blk:
            return a
        g = T.conv_transpose2d(x, blk["g.w"], blk["g.b"], stride_f=self.cfg.stride_f,
                               pad_f=self.cfg.pad_f, causal=True)
        glu = T.frame_norm(T.mul(a, T.sigmoid(g)), blk["n.g"], blk["n.b"])
        return T.elu(glu)

    def _stack_channels(self, real: T.Tensor, imag: T.Tensor) -> T.Tensor:
        B, Tn, F = real.shape
        r = T.reshape(real, (B, 1, Tn, F))
        i = T.reshape(imag, (B, 1, Tn, F))
        return T.mul(T.concat([r, i], axis=1), self.cfg.input_scale)

    def encode(self, real: T.Tensor, imag: T.Tensor) -> tuple[T.Tensor, list[T.Tensor]]:
        """(B, T, bins) pair -> bottleneck (B, T, hidden) plus conv residues."""
        if real.shape[-1] != self.cfg.bins:
            raise ModelError(f"expected {self.cfg.bins} bins, got {real.shape[-1]}")
        x = self._stack_channels(real, imag)
        skips = []
        for blk in self.enc_w:
            x = self._glu_conv(x, blk)
            skips.append(x)
        B, C, Tn, F = x.shape
        flat = T.reshape(T.transpose_(x, (0, 2, 1, 3)), (B, Tn, C * F))
        return self.lstm_enc.forward(flat), skips

    def _dup_residual(self, x: T.Tensor, cout: int, f_out: int) -> T.Tensor:
        """Parameter-free stand-in for an encoder residue: average channel
        groups down to the next width and duplicate every frequency bin."""
        B, C, Tn, F = x.shape
        grp = C // cout
        x = T.mean_(T.reshape(x, (B, cout, grp, Tn, F)), axis=2)
        x = T.duplicate(x, axis=-1)
        return T.narrow(x, -1, 0, f_out)

    def decode(self, bottleneck: T.Tensor, skips: Optional[list[T.Tensor]],
               dup_skips: bool = False) -> tuple[T.Tensor, T.Tensor]:
        """Bottleneck (B, T, hidden) -> enhanced (real, imag), each (B, T, bins).

        skips are the encoder residues; with dup_skips=True they are replaced
        by local x2 frequency duplication of the decoder's own features.
        """
        cfg = self.cfg
        x = _shuffle_groups(bottleneck, cfg.lstm_groups)
        x = self.lstm_dec.forward(x)
        x = T.linear(x, self.dec_proj_w, self.dec_proj_b)
        B, Tn, D = x.shape
        fs = cfg.freq_sizes()
        C = cfg.channels[-1]
        x = T.transpose_(T.reshape(x, (B, Tn, C, fs[-1])), (0, 2, 1, 3))
        n = len(self.dec_w)
        for i, blk in enumerate(self.dec_w):
            is_last = i == n - 1
            target_c = ((cfg.in_channels,) + cfg.channels)[n - 1 - i]
            target_f = fs[n - 1 - i]
            if not is_last and dup_skips:
                res = self._dup_residual(x, target_c, target_f)
            elif not is_last and skips is not None:
                res = skips[n - 2 - i]
                if res.shape != (B, target_c, Tn, target_f):
                    raise ModelError(f"skip {n-2-i} shape {res.shape} != {(B, target_c, Tn, target_f)}")
            else:
                res = None
            x = self._glu_deconv(x, blk)
            if res is not None:
                x = T.add(x, res)
        real = T.reshape(T.narrow(x, 1, 0, 1), (B, Tn, cfg.bins))
        imag = T.reshape(T.narrow(x, 1, 1, 1), (B, Tn, cfg.bins))
        return real, imag

    def condition(self, bottleneck: T.Tensor, cond: T.Tensor) -> T.Tensor:
        """Concatenate per-frame conditioning and project back to hidden size."""
        if self.cond_w is None:
            raise ModelError("model was not built with conditioning")
        B, Tn, H = bottleneck.shape
        tc = cond.shape[1]
        if abs(tc - Tn) > 1:
            raise ModelError(f"conditioning frames {tc} vs input frames {Tn} differ by more than 1")
        m = min(tc, Tn)
        bottleneck = T.narrow(bottleneck, 1, 0, m)
        cond = T.narrow(cond, 1, 0, m)
        joined = T.concat([bottleneck, cond], axis=2)
        return T.linear(joined, self.cond_w, self.cond_b)

    def forward(self, real: T.Tensor, imag: T.Tensor,
                cond: Optional[T.Tensor] = None) -> tuple[T.Tensor, T.Tensor]:
        bottleneck, skips = self.encode(real, imag)
        m = real.shape[1]
        if self.cfg.cond_mode == "concat":
            if cond is None:
                raise ModelError("this model requires teacher conditioning at inference")
            m = min(bottleneck.shape[1], cond.shape[1])
            bottleneck = self.condition(bottleneck, cond)
            skips = [T.narrow(s, 2, 0, m) for s in skips]
        elif cond is not None:
            raise ModelError("model built without conditioning got a condition input")
        out_r, out_i = self.decode(bottleneck, skips)
        # the noisy spectrogram is the zeroth down-sampling residue: adding it
        # makes the net predict a correction, starting from the identity map.
        # The correction is lifted back from the scaled domain the net works in.
        lift = 1.0 / self.cfg.input_scale
        return (T.add(T.mul(out_r, lift), T.narrow(real, 1, 0, m)),
                T.add(T.mul(out_i, lift), T.narrow(imag, 1, 0, m)))

    def stream(self) -> "GcrnStream":
        if self.cfg.cond_mode != "none":
            raise ModelError("streaming inference supports unconditioned models only")
        return GcrnStream(self)


class GcrnStream:
    """Frame-by-frame inference state: conv history plus LSTM carry."""

    def __init__(self, model: Gcrn):
        self.model = model
        kt = model.cfg.kernel_t
        self._hist_enc = [None] * len(model.enc_w)   # last kt-1 input frames per block
        self._hist_dec = [None] * len(model.dec_w)
        self._lstm_enc = model.lstm_enc.init_state(1, model.dtype)
        self._lstm_dec = model.lstm_dec.init_state(1, model.dtype)
        self._kt = kt
        self._finished = False

    def finish(self):
        self._finished = True

    def _with_history(self, x: T.Tensor, hist: list, idx: int) -> T.Tensor:
        """Prepend cached past frames (zeros at stream start)."""
        past = hist[idx]
        if past is None:
            z = np.zeros(x.shape[:2] + (self._kt - 1,) + x.shape[3:], dtype=x.dtype)
            past = T.Tensor(z)
        joined = T.concat([past, x], axis=2)
        hist[idx] = T.Tensor(joined.data[:, :, -(self._kt - 1):, :].copy()) if self._kt > 1 else past
        return joined

    def push(self, real_frame: np.ndarray, imag_frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One spectrogram frame (bins,) in, one enhanced frame out."""
        if self._finished:
            raise ModelError("stream state already finished; create a new stream")
        m = self.model
        cfg = m.cfg
        with T.no_grad():
            real = T.Tensor(np.asarray(real_frame, dtype=m.dtype).reshape(1, 1, cfg.bins))
            imag = T.Tensor(np.asarray(imag_frame, dtype=m.dtype).reshape(1, 1, cfg.bins))
            x = m._stack_channels(real, imag)
            skips = []
            for i, blk in enumerate(m.enc_w):
                x = m._glu_conv(self._with_history(x, self._hist_enc, i), blk)
                x = T.narrow(x, 2, x.shape[2] - 1, 1)
                skips.append(x)
            B, C, _, F = x.shape
            flat = T.reshape(T.transpose_(x, (0, 2, 1, 3)), (B, C * F))
            h, self._lstm_enc = m.lstm_enc.step(flat, self._lstm_enc)
            h = T.reshape(h, (1, 1, cfg.lstm_hidden))
            h = _shuffle_groups(h, cfg.lstm_groups)
            h2, self._lstm_dec = m.lstm_dec.step(T.reshape(h, (1, cfg.lstm_hidden)), self._lstm_dec)
            x = T.linear(T.reshape(h2, (1, 1, cfg.lstm_hidden)), m.dec_proj_w, m.dec_proj_b)
            fs = cfg.freq_sizes()
            x = T.transpose_(T.reshape(x, (1, 1, cfg.channels[-1], fs[-1])), (0, 2, 1, 3))
            n = len(m.dec_w)
            for i, blk in enumerate(m.dec_w):
                x = m._glu_deconv(self._with_history(x, self._hist_dec, i), blk)
                x = T.narrow(x, 2, x.shape[2] - 1, 1)
                if i < n - 1:
                    x = T.add(x, skips[n - 2 - i])
            lift = np.asarray(1.0 / cfg.input_scale, dtype=m.dtype)
            out_r = x.data[0, 0, 0, :] * lift + np.asarray(real_frame, dtype=m.dtype)
            out_i = x.data[0, 1, 0, :] * lift + np.asarray(imag_frame, dtype=m.dtype)
        return out_r, out_i
