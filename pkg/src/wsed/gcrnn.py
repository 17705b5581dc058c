"""Gated convolutional recurrent network with attention pooling.

Layout: input (B, T, F) -> gated conv blocks on (B, T, F, C) with frequency
pooling -> bidirectional GRU over time -> per-frame classification (sigmoid)
and attention (softmax over classes) heads -> attention-weighted clip score.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

Params = Mapping[str, Tensor]


@dataclass
class GcrnnConfig:
    n_classes: int = 10
    n_mels: int = 64
    n_gated_blocks: int = 3
    filters: int = 64
    kernel: int = 3
    freq_pool: int = 4
    rnn_units: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.n_mels % (self.freq_pool ** self.n_gated_blocks):
            raise ValueError(
                f"freq_pool^n_gated_blocks = {self.freq_pool ** self.n_gated_blocks} "
                f"must divide n_mels = {self.n_mels}")

    @property
    def freq_out(self) -> int:
        return self.n_mels // self.freq_pool ** self.n_gated_blocks


class FramePredictions(NamedTuple):
    z_cla: np.ndarray  # (T, M)
    z_att: np.ndarray  # (T, M)


class ModelOutput(NamedTuple):
    z_cla: Tensor  # (B, T, M)
    z_att: Tensor  # (B, T, M)
    y: Tensor      # (B, M)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(config: GcrnnConfig, seed: int = 0, dtype=np.float32) -> dict[str, Parameter]:
    rng = np.random.default_rng(seed)
    k, c = config.kernel, config.filters
    params: dict[str, Parameter] = {}

    def add(name, data):
        params[name] = Parameter(name, data, dtype=dtype)

    c_in = 1
    for i in range(config.n_gated_blocks):
        fan_in, fan_out = k * k * c_in, k * k * c
        add(f"glu{i}.W", _glorot(rng, (k, k, c_in, c), fan_in, fan_out, dtype))
        add(f"glu{i}.b", np.zeros(c))
        add(f"glu{i}.V", _glorot(rng, (k, k, c_in, c), fan_in, fan_out, dtype))
        add(f"glu{i}.c", np.zeros(c))
        c_in = c
    d_in, h = c * config.freq_out, config.rnn_units
    for direction in ("fwd", "bwd"):
        add(f"rnn.{direction}.Wx", _glorot(rng, (d_in, 3 * h), d_in, 3 * h, dtype))
        add(f"rnn.{direction}.Wh", _glorot(rng, (h, 3 * h), h, 3 * h, dtype))
        add(f"rnn.{direction}.bx", np.zeros(3 * h))
        add(f"rnn.{direction}.bh", np.zeros(3 * h))
    m = config.n_classes
    add("cla.W", _glorot(rng, (2 * h, m), 2 * h, m, dtype))
    add("cla.b", np.zeros(m))
    add("att.W", _glorot(rng, (2 * h, m), 2 * h, m, dtype))
    add("att.b", np.zeros(m))
    return params


def glu_block(x: Tensor, w: Tensor, b: Tensor, v: Tensor, c: Tensor, freq_pool: int) -> Tensor:
    """(W*X + b) * sigmoid(V*X + c), then max-pool over frequency.

    Both convolutions run as one with stacked kernels.
    """
    n = w.shape[3]
    both = ad.conv2d(x, ad.concat([w, v], axis=3)) + ad.concat([b, c], axis=0)
    lin = both[..., :n]
    gate = ad.sigmoid(both[..., n:])
    return ad.maxpool_freq(lin * gate, freq_pool)


def frontend(params: Params, x: Tensor, config: GcrnnConfig) -> Tensor:
    """Gated conv stack; (B, T, F) -> (B, T, C * F_out)."""
    if x.ndim != 3 or x.shape[2] != config.n_mels:
        raise ad.ShapeError(f"shape mismatch: input {x.shape} vs n_mels {config.n_mels}")
    B, T, _ = x.shape
    h = ad.reshape(x, (B, T, config.n_mels, 1))
    for i in range(config.n_gated_blocks):
        h = glu_block(h, params[f"glu{i}.W"], params[f"glu{i}.b"],
                      params[f"glu{i}.V"], params[f"glu{i}.c"], config.freq_pool)
    return ad.reshape(h, (B, T, config.filters * config.freq_out))


def attention_pool(z_cla: Tensor, z_att: Tensor) -> Tensor:
    """Clip score per class: sum_t z_cla * z_att / sum_t z_att, over axis -2."""
    z_cla, z_att = ad.as_tensor(z_cla), ad.as_tensor(z_att)
    if z_cla.shape != z_att.shape:
        raise ad.ShapeError(f"shape mismatch: {z_cla.shape} vs {z_att.shape}")
    mass = ad.tsum(z_att, axis=-2)
    if np.any(mass.data <= 0):
        raise FloatingPointError("degenerate attention")
    return ad.tsum(z_cla * z_att, axis=-2) / mass


def forward(params: Params, x, config: GcrnnConfig,
            dropout_rng: np.random.Generator | None = None) -> ModelOutput:
    """Run the network on a (B, T, F) batch, or a single (T, F) spectrogram.

    Dropout on the recurrent input is applied only when ``dropout_rng`` is
    given and ``config.dropout > 0``.
    """
    x = ad.as_tensor(x)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    feats = frontend(params, x, config)
    if dropout_rng is not None and config.dropout > 0:
        keep = 1.0 - config.dropout
        mask = (dropout_rng.random(feats.shape) < keep).astype(feats.dtype) / keep
        feats = feats * mask
    fw = ad.gru(feats, params["rnn.fwd.Wx"], params["rnn.fwd.Wh"],
                params["rnn.fwd.bx"], params["rnn.fwd.bh"])
    bw = ad.gru(feats, params["rnn.bwd.Wx"], params["rnn.bwd.Wh"],
                params["rnn.bwd.bx"], params["rnn.bwd.bh"], reverse=True)
    h = ad.concat([fw, bw], axis=2)
    z_cla = ad.sigmoid(h @ params["cla.W"] + params["cla.b"])
    z_att = ad.softmax(h @ params["att.W"] + params["att.b"], axis=-1)
    y = attention_pool(z_cla, z_att)
    if not (np.all(np.isfinite(z_cla.data)) and np.all(np.isfinite(z_att.data))):
        raise ad.NonFiniteError("non-finite activation")
    return ModelOutput(z_cla, z_att, y)


def predict_clip(params: Params, values: np.ndarray, config: GcrnnConfig) -> tuple[FramePredictions, np.ndarray]:
    out = forward(params, values, config)
    return FramePredictions(out.z_cla.data[0], out.z_att.data[0]), out.y.data[0]


def predict_batch(params: Params, batch: list[np.ndarray], config: GcrnnConfig,
                  chunk: int = 32) -> list[tuple[FramePredictions, np.ndarray]]:
    """Inference over many spectrograms; equal-length inputs are stacked."""
    results: list = [None] * len(batch)
    by_len: dict[int, list[int]] = {}
    for i, v in enumerate(batch):
        by_len.setdefault(v.shape[0], []).append(i)
    for idx in by_len.values():
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            out = forward(params, np.stack([batch[i] for i in part]), config)
            for j, i in enumerate(part):
                results[i] = (FramePredictions(out.z_cla.data[j], out.z_att.data[j]),
                              out.y.data[j])
    return results


def cast_params(params: Params, dtype, trainable: bool = False) -> dict[str, Tensor]:
    if trainable:
        return {k: Parameter(k, v.data, dtype=dtype) for k, v in params.items()}
    return {k: Tensor(v.data.astype(dtype)) for k, v in params.items()}


def write_activations(path, preds: FramePredictions, class_names: list[str]) -> None:
    """TSV dump with columns frame_index, class_name, z_cla, z_att."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frame_index\tclass_name\tz_cla\tz_att\n")
        for t in range(preds.z_cla.shape[0]):
            for c, name in enumerate(class_names):
                fh.write(f"{t}\t{name}\t{preds.z_cla[t, c]:.6f}\t{preds.z_att[t, c]:.6f}\n")
