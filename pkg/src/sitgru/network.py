"""Stacked recurrent encoder-decoder that reconstructs frame cuboids.

Layout of one forward pass over a batch of cuboids shaped ``(N, T, P)``
(``P`` = pixels per flattened frame):

    recurrent layer 0..L-1   each unrolled over T, followed by tanh + batch norm
    readout                  affine map of every timestep's hidden vector to P values
    final single-unit cell   shared scalar cell run over T independently per pixel
    output                   sigmoid(gain * (h - centre))

The centre is the midpoint of the final cell's state range (0.5 for cells
whose state lives in [0, inf), 0 otherwise), so an untouched state of zero
always maps to a fixed output whatever the trained gain is.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cells import CellKind, CellParams, backward_sequence, param_count, unroll_sequence
from .tensor import ActivationKind, DimensionError, activation_grad, apply_activation, glorot_uniform, sigmoid

CHECKPOINT_FORMAT = "sitgru-checkpoint/1"

_NONNEGATIVE_STATE = (CellKind.SITGRU, CellKind.SITGRU_RELU)


class ModelStateError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    layer_units: list[int] = field(default_factory=lambda: [32, 16, 8, 16, 32, 1])
    cell_kind: CellKind = CellKind.SITGRU
    inter_activation: ActivationKind = ActivationKind.TANH
    frame_pixels: int = 32 * 32
    T: int = 4

    def __post_init__(self):
        if not self.layer_units or self.layer_units[-1] != 1:
            raise ValueError(f"layer_units must end with a single-unit layer, got {self.layer_units}")
        if len(self.layer_units) < 2:
            raise ValueError("need at least one recurrent layer before the single-unit layer")
        if any(u < 1 for u in self.layer_units) or self.frame_pixels < 1 or self.T < 1:
            raise ValueError("unit counts, frame_pixels and T must be positive")

    @property
    def encoder_units(self) -> list[int]:
        return self.layer_units[:len(self.layer_units) // 2]

    @property
    def decoder_units(self) -> list[int]:
        return self.layer_units[len(self.layer_units) // 2:]

    def to_dict(self) -> dict:
        return {
            "layer_units": list(self.layer_units),
            "cell_kind": self.cell_kind.value,
            "inter_activation": self.inter_activation.value,
            "frame_pixels": self.frame_pixels,
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(list(d["layer_units"]), CellKind(d["cell_kind"]),
                   ActivationKind(d["inter_activation"]), int(d["frame_pixels"]), int(d["T"]))


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.99
    training_mode: bool = True

    @classmethod
    def create(cls, features: int, eps: float = 1e-5, momentum: float = 0.99) -> "BatchNormState":
        return cls(np.ones(features), np.zeros(features), np.zeros(features), np.ones(features),
                   eps, momentum)


def batchnorm_forward(bn: BatchNormState, batch, training: bool, *, update_running: bool = True,
                      return_cache: bool = False):
    """Normalize ``batch`` (rows = samples) per feature.

    Training mode uses batch statistics and, unless ``update_running`` is
    false, blends them into the running estimates as
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bn.gamma.size:
        raise DimensionError(f"batch norm over {bn.gamma.size} features got batch {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise ValueError(f"training-mode batch norm needs at least 2 rows, got {x.shape[0]}")
        mu = x.mean(axis=0)
        var = ((x - mu) ** 2).mean(axis=0)
        if update_running:
            bn.running_mean = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * mu
            bn.running_var = bn.momentum * bn.running_var + (1.0 - bn.momentum) * var
    else:
        mu, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mu) * inv_std
    out = bn.gamma * xhat + bn.beta
    if return_cache:
        return out, dict(xhat=xhat, inv_std=inv_std, training=training)
    return out


def batchnorm_backward(bn: BatchNormState, cache: dict, d_out: np.ndarray):
    """Returns ``(d_batch, d_gamma, d_beta)`` for a training-mode forward."""
    if not cache["training"]:
        raise ModelStateError("batch norm backward needs a training-mode cache")
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    m = xhat.shape[0]
    d_gamma = (d_out * xhat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_xhat = d_out * bn.gamma
    d_x = inv_std / m * (m * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0))
    return d_x, d_gamma, d_beta


@dataclass
class Model:
    config: NetworkConfig
    cells: list[CellParams]
    norms: list[BatchNormState]
    readout_weight: np.ndarray
    readout_bias: np.ndarray
    final: CellParams
    output_gain: np.ndarray

    @property
    def state_centre(self) -> float:
        return 0.5 if self.config.cell_kind in _NONNEGATIVE_STATE else 0.0

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name, in checkpoint order.  Values are live references."""
        out = {}
        for i, (cell, bn) in enumerate(zip(self.cells, self.norms)):
            for name in cell.names():
                out[f"layer{i}.{name}"] = cell.tensors[name]
            out[f"bn{i}.gamma"] = bn.gamma
            out[f"bn{i}.beta"] = bn.beta
        out["readout.weight"] = self.readout_weight
        out["readout.bias"] = self.readout_bias
        for name in self.final.names():
            out[f"final.{name}"] = self.final.tensors[name]
        out["output.gain"] = self.output_gain
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.norms):
            out[f"bn{i}.running_mean"] = bn.running_mean
            out[f"bn{i}.running_var"] = bn.running_var
        return out

    def recurrent_param_count(self) -> int:
        return sum(c.size() for c in self.cells) + self.final.size()

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def init_model(config: NetworkConfig, rng: np.random.Generator, output_gain: float = 4.0) -> Model:
    cells, norms = [], []
    d = config.frame_pixels
    for n in config.layer_units[:-1]:
        cells.append(CellParams.init(config.cell_kind, d, n, rng))
        norms.append(BatchNormState.create(n))
        d = n
    readout_w = glorot_uniform(rng, config.frame_pixels, d)
    final = CellParams.init(config.cell_kind, 1, config.layer_units[-1], rng)
    return Model(config, cells, norms, readout_w, np.zeros(config.frame_pixels), final,
                 np.array([output_gain]))


def _as_batch(c, config: NetworkConfig) -> tuple[np.ndarray, bool]:
    x = np.asarray(c, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.T, config.frame_pixels):
        raise DimensionError(
            f"expected cuboid shape (T={config.T}, P={config.frame_pixels}) with optional batch axis, "
            f"got {np.shape(c)}")
    return x, single


def forward_cuboid(m: Model, c, training: bool, *, update_running: bool = True):
    """Reconstruct a cuboid ``(T, P)`` or a batch ``(N, T, P)``.

    Returns ``(recon, cache)``; ``recon`` has the same shape as ``c``.
    """
    cfg = m.config
    x, single = _as_batch(c, cfg)
    N, T, P = x.shape
    act = cfg.inter_activation
    a = x
    layers = []
    for cell, bn in zip(m.cells, m.norms):
        states, _ = unroll_sequence(cell, [a[:, t, :] for t in range(T)], np.zeros((N, cell.n)))
        y = apply_activation(np.stack([s.h for s in states], axis=1), act)
        normed, bn_cache = batchnorm_forward(bn, y.reshape(N * T, cell.n), training,
                                             update_running=update_running, return_cache=True)
        layers.append((states, y, bn_cache, a))
        a = normed.reshape(N, T, cell.n)
    u = a @ m.readout_weight.T + m.readout_bias
    per_pixel = u.transpose(0, 2, 1).reshape(N * P, T)
    f_states, _ = unroll_sequence(m.final, [per_pixel[:, t:t + 1] for t in range(T)],
                                  np.zeros((N * P, 1)))
    hf = np.concatenate([s.h for s in f_states], axis=1)
    out = sigmoid(m.output_gain[0] * (hf - m.state_centre))
    recon = out.reshape(N, P, T).transpose(0, 2, 1)
    cache = dict(training=training, single=single, shape=(N, T, P), layers=layers, top=a,
                 f_states=f_states, hf=hf, out=out)
    return (recon[0] if single else recon), cache


def backward_cuboid(m: Model, cache: dict, d_recon) -> dict[str, np.ndarray]:
    """Gradients of the loss for every entry of ``m.parameters()``."""
    if not cache["training"]:
        raise ModelStateError("backward_cuboid needs the cache of a training-mode forward")
    N, T, P = cache["shape"]
    d = np.asarray(d_recon, dtype=np.float64)
    if cache["single"]:
        d = d[None]
    if d.shape != (N, T, P):
        raise DimensionError(f"gradient shape {d.shape} does not match reconstruction {(N, T, P)}")
    grads: dict[str, np.ndarray] = {}

    out, hf = cache["out"], cache["hf"]
    d_pre = d.transpose(0, 2, 1).reshape(N * P, T) * out * (1.0 - out)
    grads["output.gain"] = np.array([(d_pre * (hf - m.state_centre)).sum()])
    d_hf = d_pre * m.output_gain[0]
    fg = backward_sequence(m.final, cache["f_states"], [d_hf[:, t:t + 1] for t in range(T)])
    du = fg.x[:, :, 0].T.reshape(N, P, T).transpose(0, 2, 1)

    top = cache["top"]
    grads["readout.weight"] = du.reshape(-1, P).T @ top.reshape(N * T, -1)
    grads["readout.bias"] = du.sum(axis=(0, 1))
    da = du @ m.readout_weight

    act = m.config.inter_activation
    for i in range(len(m.cells) - 1, -1, -1):
        cell, bn = m.cells[i], m.norms[i]
        states, y, bn_cache, _ = cache["layers"][i]
        dy, d_gamma, d_beta = batchnorm_backward(bn, bn_cache, da.reshape(N * T, cell.n))
        grads[f"bn{i}.gamma"] = d_gamma
        grads[f"bn{i}.beta"] = d_beta
        dh = dy.reshape(N, T, cell.n) * activation_grad(y, act)
        cg = backward_sequence(cell, states, [dh[:, t, :] for t in range(T)])
        for name, g in cg.params.items():
            grads[f"layer{i}.{name}"] = g
        da = cg.x.transpose(1, 0, 2)
    for name, g in fg.params.items():
        grads[f"final.{name}"] = g
    return {name: grads[name] for name in m.parameters()}


def recurrent_param_ratio(config: NetworkConfig, kind_a: CellKind, kind_b: CellKind) -> float:
    """Ratio of recurrent parameter counts for the same layout built from two cell kinds."""
    def total(kind):
        d, s = config.frame_pixels, 0
        for n in config.layer_units[:-1]:
            s += param_count(kind, d, n)
            d = n
        return s + param_count(kind, 1, config.layer_units[-1])
    return total(kind_a) / total(kind_b)


def save_checkpoint(m: Model, path, extras: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write a JSON header line followed by little-endian float64 arrays in header order."""
    arrays = dict(m.parameters())
    arrays.update(m.buffers())
    for k, v in (extras or {}).items():
        arrays[f"extra.{k}"] = np.asarray(v, dtype=np.float64)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": m.config.to_dict(),
        "bn": [{"eps": bn.eps, "momentum": bn.momentum} for bn in m.norms],
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
        "meta": meta or {},
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)


def load_checkpoint(path):
    """Returns ``(model, extras, meta)``."""
    raw = Path(path).read_bytes()
    head, _, blob = raw.partition(b"\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a checkpoint ({exc})") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    config = NetworkConfig.from_dict(header["config"])
    m = init_model(config, np.random.default_rng(0))
    for bn, opts in zip(m.norms, header["bn"]):
        bn.eps, bn.momentum = opts["eps"], opts["momentum"]
    values = np.frombuffer(blob, dtype="<f8")
    targets = dict(m.parameters())
    targets.update(m.buffers())
    extras = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = values[offset:offset + count].reshape(shape).astype(np.float64)
        offset += count
        if name.startswith("extra."):
            extras[name[len("extra."):]] = arr
        elif name in targets:
            if targets[name].shape != arr.shape:
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {targets[name].shape}")
            targets[name][...] = arr
        else:
            raise ValueError(f"{path}: unknown array {name}")
    if offset != values.size:
        raise ValueError(f"{path}: {values.size - offset} trailing values")
    return m, extras, header["meta"]
