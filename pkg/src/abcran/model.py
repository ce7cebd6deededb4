"""Attention-based convolutional recurrent autoencoder.

Topology under the default configuration (15 named layers)::

    encoder     conv1 -> pool1 -> conv2 -> pool2 -> dense1 -> latent
    propagator  lstm_encoder -> lstm_decoder -> attention (dot attention + output projection)
    decoder     dec_dense1 -> dec_dense2 -> up2 -> dec_conv2 -> up1 -> dec_conv1

Hidden layers use tanh; the latent and the reconstructed field are linear.
Fields are divided by ``field_scale`` on the way in and multiplied back on the
way out, so losses stay in physical units while the network sees O(1) data.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tape, Tensor

MODEL_VERSION = 1
ARCH_NAME = "arch.json"
WEIGHTS_NAME = "weights.bin"


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    nx: int = 256
    latent_dim: int = 2
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_sizes: tuple[int, ...] = (5, 5)
    dense_widths: tuple[int, ...] = (128,)
    lstm_hidden: int = 64
    k_in: int = 10
    k_out: int = 10
    field_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "dense_widths", tuple(int(d) for d in self.dense_widths))
        if self.latent_dim < 1 or self.lstm_hidden < 1 or self.k_in < 1 or self.k_out < 1:
            raise ValueError("latent_dim, lstm_hidden, k_in and k_out must be positive")
        if len(self.conv_channels) != len(self.kernel_sizes) or not self.conv_channels:
            raise ValueError("need one kernel size per conv layer and at least one conv layer")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be odd so 'same' padding preserves width")
        if self.nx % self.pool_factor:
            raise ValueError(f"nx={self.nx} must be divisible by {self.pool_factor}")
        if not self.field_scale > 0:
            raise ValueError("field_scale must be positive")

    @property
    def pool_factor(self) -> int:
        return 2 ** len(self.conv_channels)

    @property
    def flat_width(self) -> int:
        return self.conv_channels[-1] * (self.nx // self.pool_factor)

    def layer_names(self) -> list[str]:
        n_conv = len(self.conv_channels)
        enc: list[str] = []
        for i in range(1, n_conv + 1):
            enc += [f"conv{i}", f"pool{i}"]
        enc += [f"dense{i}" for i in range(1, len(self.dense_widths) + 1)] + ["latent"]
        prop = ["lstm_encoder", "lstm_decoder", "attention"]
        dec = [f"dec_dense{i}" for i in range(1, len(self.dense_widths) + 2)]
        for i in range(n_conv, 0, -1):
            dec += [f"up{i}", f"dec_conv{i}"]
        return enc + prop + dec

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("conv_channels", "kernel_sizes", "dense_widths"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def _param_shapes(cfg: ArchConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) in canonical order."""
    shapes = []
    cin = 1
    for i, (c, k) in enumerate(zip(cfg.conv_channels, cfg.kernel_sizes), start=1):
        shapes += [(f"conv{i}.w", (c, cin, k), cin * k), (f"conv{i}.b", (c,), cin * k)]
        cin = c
    widths = [cfg.flat_width, *cfg.dense_widths, cfg.latent_dim]
    names = [f"dense{i}" for i in range(1, len(cfg.dense_widths) + 1)] + ["latent"]
    for name, a, b in zip(names, widths[:-1], widths[1:]):
        shapes += [(f"{name}.w", (a, b), a), (f"{name}.b", (b,), a)]

    r, h = cfg.latent_dim, cfg.lstm_hidden
    for name in ("lstm_encoder", "lstm_decoder"):
        shapes += [(f"{name}.w", (r + h, 4 * h), r + h), (f"{name}.b", (4 * h,), r + h)]
    shapes += [("attention.w", (2 * h, r), 2 * h), ("attention.b", (r,), 2 * h)]

    rev = widths[::-1]
    for i, (a, b) in enumerate(zip(rev[:-1], rev[1:]), start=1):
        shapes += [(f"dec_dense{i}.w", (a, b), a), (f"dec_dense{i}.b", (b,), a)]
    chans = [1, *cfg.conv_channels]
    for i in range(len(cfg.conv_channels), 0, -1):
        c_in, c_out, k = chans[i], chans[i - 1], cfg.kernel_sizes[i - 1]
        shapes += [(f"dec_conv{i}.w", (c_out, c_in, k), c_in * k), (f"dec_conv{i}.b", (c_out,), c_in * k)]
    return shapes


class AbcranModel:
    def __init__(self, config: ArchConfig, seed: int = 0, init: str = "uniform"):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        params = []
        for name, shape, fan_in in _param_shapes(config):
            if init == "zeros" or name.endswith(".b"):
                value = np.zeros(shape)
            elif init == "uniform":
                bound = 1.0 / math.sqrt(fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            else:
                raise ValueError(f"unknown init {init!r}")
            params.append(Parameter(name, value))
        self.params: dict[str, Parameter] = dc.parameters_by_name(params)

    # -- parameter helpers -------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.shape}")
            p.value = v.copy()

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def _p(self, tape: Tape, name: str) -> Tensor:
        return tape.param(self.params[name])

    # -- graph builders ----------------------------------------------------

    def encode_graph(self, tape: Tape, field: Tensor) -> Tensor:
        cfg = self.config
        if field.ndim != 2 or field.shape[1] != cfg.nx:
            raise ValueError(f"expected field [batch, {cfg.nx}], got {field.shape}")
        n = field.shape[0]
        x = dc.reshape(field / cfg.field_scale, (n, 1, cfg.nx))
        for i, k in enumerate(cfg.kernel_sizes, start=1):
            x = dc.conv1d(x, self._p(tape, f"conv{i}.w"), self._p(tape, f"conv{i}.b"), padding=k // 2)
            x = dc.maxpool1d(dc.tanh(x), 2)
        x = dc.reshape(x, (n, cfg.flat_width))
        for i in range(1, len(cfg.dense_widths) + 1):
            x = dc.tanh(dc.dense(x, self._p(tape, f"dense{i}.w"), self._p(tape, f"dense{i}.b")))
        return dc.dense(x, self._p(tape, "latent.w"), self._p(tape, "latent.b"))

    def decode_graph(self, tape: Tape, latent: Tensor) -> Tensor:
        cfg = self.config
        if latent.ndim != 2 or latent.shape[1] != cfg.latent_dim:
            raise ValueError(f"expected latent [batch, {cfg.latent_dim}], got {latent.shape}")
        n = latent.shape[0]
        x = latent
        for i in range(1, len(cfg.dense_widths) + 2):
            x = dc.tanh(dc.dense(x, self._p(tape, f"dec_dense{i}.w"), self._p(tape, f"dec_dense{i}.b")))
        x = dc.reshape(x, (n, cfg.conv_channels[-1], cfg.nx // cfg.pool_factor))
        for i in range(len(cfg.conv_channels), 0, -1):
            x = dc.upsample1d(x, 2)
            x = dc.conv1d(
                x, self._p(tape, f"dec_conv{i}.w"), self._p(tape, f"dec_conv{i}.b"),
                padding=cfg.kernel_sizes[i - 1] // 2,
            )
            if i > 1:
                x = dc.tanh(x)
        return dc.reshape(x, (n, cfg.nx)) * cfg.field_scale

    def propagate_graph(self, tape: Tape, latent_seq: Tensor) -> Tensor:
        cfg = self.config
        if latent_seq.ndim != 3 or latent_seq.shape[1:] != (cfg.k_in, cfg.latent_dim):
            raise ValueError(f"expected latents [batch, {cfg.k_in}, {cfg.latent_dim}], got {latent_seq.shape}")
        bsz = latent_seq.shape[0]
        h = tape.constant(np.zeros((bsz, cfg.lstm_hidden)))
        c = h
        w_enc, b_enc = self._p(tape, "lstm_encoder.w"), self._p(tape, "lstm_encoder.b")
        states = []
        for t in range(cfg.k_in):
            h, c = dc.lstm_cell(latent_seq[:, t, :], h, c, w_enc, b_enc)
            states.append(h)
        memory = dc.stack(states, axis=1)

        w_dec, b_dec = self._p(tape, "lstm_decoder.w"), self._p(tape, "lstm_decoder.b")
        w_att, b_att = self._p(tape, "attention.w"), self._p(tape, "attention.b")
        step_in = latent_seq[:, cfg.k_in - 1, :]
        outputs = []
        for _ in range(cfg.k_out):
            h, c = dc.lstm_cell(step_in, h, c, w_dec, b_dec)
            context = dc.dot_attention(h, memory, memory)
            step_in = dc.dense(dc.concat([h, context], axis=-1), w_att, b_att)
            outputs.append(step_in)
        return dc.stack(outputs, axis=1)

    # -- array-level API ---------------------------------------------------

    def encode(self, field: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.encode_graph(tape, tape.constant(field)).value

    def decode(self, latent: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.decode_graph(tape, tape.constant(latent)).value

    def propagate(self, latent_seq: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.propagate_graph(tape, tape.constant(latent_seq)).value


def rollout(model: AbcranModel, seed_window: np.ndarray, n_steps: int) -> np.ndarray:
    """Free-running prediction of ``n_steps`` fields after a true seed window.

    Predicted latents, not re-encoded fields, are fed back into the propagator.
    """
    cfg = model.config
    seed_window = np.asarray(seed_window, dtype=np.float64)
    if seed_window.shape != (cfg.k_in, cfg.nx):
        raise ValueError(f"seed window must be [{cfg.k_in}, {cfg.nx}], got {seed_window.shape}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    window = model.encode(seed_window)
    blocks = []
    produced = 0
    while produced < n_steps:
        pred = model.propagate(window[None])[0]
        blocks.append(model.decode(pred))
        produced += cfg.k_out
        window = np.concatenate([window, pred], axis=0)[-cfg.k_in:]
    return np.concatenate(blocks, axis=0)[:n_steps]


def save_model(model: AbcranModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    chunks = []
    for name, p in model.params.items():
        data = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(data)
        chunks.append(data)
    (path / WEIGHTS_NAME).write_bytes(b"".join(chunks))
    arch = {
        "version": MODEL_VERSION,
        "seed": model.seed,
        "config": model.config.to_dict(),
        "layers": model.config.layer_names(),
        "parameters": manifest,
        "total_bytes": offset,
    }
    (path / ARCH_NAME).write_text(json.dumps(arch, indent=2), encoding="utf-8")


def load_model(path) -> AbcranModel:
    path = Path(path)
    try:
        arch = json.loads((path / ARCH_NAME).read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read {ARCH_NAME}: {exc}") from exc
    if arch.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {arch.get('version')!r}")
    model = AbcranModel(ArchConfig.from_dict(arch["config"]), seed=arch.get("seed", 0), init="zeros")
    raw = (path / WEIGHTS_NAME).read_bytes()
    entries = arch["parameters"]
    if [e["name"] for e in entries] != list(model.params):
        raise ModelFormatError("parameter manifest does not match the architecture")
    expected = sum(8 * int(np.prod(e["shape"])) for e in entries)
    if len(raw) != expected or arch.get("total_bytes", expected) != expected:
        raise ModelFormatError(f"{WEIGHTS_NAME} has {len(raw)} bytes, manifest implies {expected}")
    for e in entries:
        p = model.params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise ModelFormatError(f"shape of {e['name']} disagrees with the architecture")
        n = int(np.prod(e["shape"]))
        chunk = np.frombuffer(raw, dtype="<f8", count=n, offset=int(e["offset"]))
        p.value = chunk.astype(np.float64).reshape(p.shape)
    return model
