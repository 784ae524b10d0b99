"""Recurrent cells: GRU, single-tunnelled GRU variants, the no-update ablation and LSTM.

Every cell works on a single vector ``x`` of shape ``(d,)`` or on a batch of
row vectors ``(B, d)``; hidden states follow the same convention.  Weight
matrices are stored as ``hidden x input`` so a pre-activation reads
``x @ W.T + h @ U.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .tensor import ActivationKind, DimensionError, activation_grad, apply_activation, glorot_uniform, sigmoid


class CellStateError(RuntimeError):
    """Backward pass requested without a usable forward cache."""


class CellKind(Enum):
    GRU = "gru"
    SITGRU = "sitgru"
    SITGRU_TANH_NORESET = "sitgru_tanh"
    SITGRU_RELU = "sitgru_relu"
    GRU_NO_UPDATE = "gru_no_update"
    LSTM = "lstm"


SITGRU_FAMILY = (CellKind.SITGRU, CellKind.SITGRU_TANH_NORESET, CellKind.SITGRU_RELU)

# Gate letters in serialization order.
GATES = {
    CellKind.GRU: ("z", "r", "h"),
    CellKind.SITGRU: ("z", "h"),
    CellKind.SITGRU_TANH_NORESET: ("z", "h"),
    CellKind.SITGRU_RELU: ("z", "h"),
    CellKind.GRU_NO_UPDATE: ("r", "h"),
    CellKind.LSTM: ("i", "f", "o", "g"),
}

CANDIDATE_ACTIVATION = {
    CellKind.GRU: ActivationKind.TANH,
    CellKind.SITGRU: ActivationKind.SIGMOID,
    CellKind.SITGRU_TANH_NORESET: ActivationKind.TANH,
    CellKind.SITGRU_RELU: ActivationKind.RELU,
    CellKind.GRU_NO_UPDATE: ActivationKind.TANH,
    CellKind.LSTM: ActivationKind.TANH,
}


def param_names(kind: CellKind) -> list[str]:
    names = []
    for g in GATES[kind]:
        names += [f"W_{g}", f"U_{g}", f"b_{g}"]
    return names


def param_count(kind: CellKind, d: int, n: int) -> int:
    if d < 1 or n < 1:
        raise ValueError("d and n must be positive")
    return len(GATES[kind]) * (d * n + n * n + n)


@dataclass
class CellParams:
    kind: CellKind
    d: int
    n: int
    tensors: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, kind: CellKind, d: int, n: int) -> "CellParams":
        tensors = {}
        for name in param_names(kind):
            tensors[name] = np.zeros(_param_shape(name, d, n))
        return cls(kind, d, n, tensors)

    @classmethod
    def init(cls, kind: CellKind, d: int, n: int, rng: np.random.Generator) -> "CellParams":
        """Glorot-uniform matrices, zero biases."""
        p = cls.zeros(kind, d, n)
        for name in p.names():
            if name[0] == "W":
                p.tensors[name] = glorot_uniform(rng, n, d)
            elif name[0] == "U":
                p.tensors[name] = glorot_uniform(rng, n, n)
        return p

    def names(self) -> list[str]:
        return param_names(self.kind)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "CellParams":
        return CellParams(self.kind, self.d, self.n, {k: v.copy() for k, v in self.tensors.items()})

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def to_bytes(self) -> bytes:
        header = {"kind": self.kind.value, "d": self.d, "n": self.n, "order": self.names()}
        blob = b"".join(self.tensors[k].astype("<f8").tobytes() for k in self.names())
        return json.dumps(header, sort_keys=True).encode() + b"\n" + blob

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CellParams":
        head, _, blob = raw.partition(b"\n")
        header = json.loads(head)
        p = cls.zeros(CellKind(header["kind"]), header["d"], header["n"])
        if header["order"] != p.names():
            raise ValueError(f"unexpected parameter order {header['order']}")
        values = np.frombuffer(blob, dtype="<f8")
        if values.size != p.size():
            raise ValueError(f"expected {p.size()} doubles, found {values.size}")
        offset = 0
        for name in p.names():
            shape = p.tensors[name].shape
            count = int(np.prod(shape))
            p.tensors[name] = values[offset:offset + count].reshape(shape).astype(np.float64)
            offset += count
        return p


def _param_shape(name: str, d: int, n: int) -> tuple[int, ...]:
    if name[0] == "W":
        return (n, d)
    if name[0] == "U":
        return (n, n)
    return (n,)


@dataclass
class CellState:
    h: np.ndarray
    cache: dict | None = None
    c: np.ndarray | None = None  # LSTM cell memory


@dataclass
class CellGrads:
    params: dict[str, np.ndarray]
    h_prev: np.ndarray
    x: np.ndarray
    c_prev: np.ndarray | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]


def _check(p: CellParams, x: np.ndarray, h_prev: np.ndarray) -> None:
    if x.shape[-1] != p.d or h_prev.shape[-1] != p.n or x.shape[:-1] != h_prev.shape[:-1]:
        raise DimensionError(
            f"{p.kind.value} cell with d={p.d}, n={p.n} got x {x.shape} and h {h_prev.shape}")


def _pre(p: CellParams, gate: str, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    return x @ p[f"W_{gate}"].T + h @ p[f"U_{gate}"].T + p[f"b_{gate}"]


def gru_step(p: CellParams, x, h_prev, reset_gate=None) -> CellState:
    """Standard GRU step.

    ``reset_gate`` overrides the computed r_t (test hook); the override is
    treated as a constant in the backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    _check(p, x, h_prev)
    z = sigmoid(_pre(p, "z", x, h_prev))
    if reset_gate is None:
        r = sigmoid(_pre(p, "r", x, h_prev))
    else:
        r = np.broadcast_to(np.asarray(reset_gate, dtype=np.float64), h_prev.shape)
    hr = h_prev * r
    cand = np.tanh(x @ p["W_h"].T + hr @ p["U_h"].T + p["b_h"])
    h = z * h_prev + (1.0 - z) * cand
    cache = dict(kind=CellKind.GRU, params=p, x=x, h_prev=h_prev, z=z, r=r, hr=hr, cand=cand,
                 reset_fixed=reset_gate is not None)
    return CellState(h, cache)


def sitgru_step(p: CellParams, x, h_prev) -> CellState:
    """Reset-free step shared by SITGRU, SITGRU_TANH_NORESET and SITGRU_RELU.

    The candidate activation is selected by ``p.kind``.
    """
    if p.kind not in SITGRU_FAMILY:
        raise ValueError(f"sitgru_step cannot run a {p.kind.value} cell")
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    _check(p, x, h_prev)
    z = sigmoid(_pre(p, "z", x, h_prev))
    cand = apply_activation(_pre(p, "h", x, h_prev), CANDIDATE_ACTIVATION[p.kind])
    h = z * h_prev + (1.0 - z) * cand
    return CellState(h, dict(kind=p.kind, params=p, x=x, h_prev=h_prev, z=z, cand=cand))


def noupdate_step(p: CellParams, x, h_prev) -> CellState:
    """GRU with the update gate removed: the state never changes."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    _check(p, x, h_prev)
    r = sigmoid(_pre(p, "r", x, h_prev))
    cand = np.tanh(x @ p["W_h"].T + (h_prev * r) @ p["U_h"].T + p["b_h"])
    return CellState(h_prev.copy(), dict(kind=p.kind, params=p, x=x, h_prev=h_prev, r=r, cand=cand))


def lstm_step(p: CellParams, x, h_prev, c_prev=None) -> CellState:
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    _check(p, x, h_prev)
    c_prev = np.zeros_like(h_prev) if c_prev is None else np.asarray(c_prev, dtype=np.float64)
    i = sigmoid(_pre(p, "i", x, h_prev))
    f = sigmoid(_pre(p, "f", x, h_prev))
    o = sigmoid(_pre(p, "o", x, h_prev))
    g = np.tanh(_pre(p, "g", x, h_prev))
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = dict(kind=p.kind, params=p, x=x, h_prev=h_prev, c_prev=c_prev, i=i, f=f, o=o, g=g, tc=tc)
    return CellState(h, cache, c)


def step(p: CellParams, x, h_prev, c_prev=None) -> CellState:
    if p.kind is CellKind.GRU:
        return gru_step(p, x, h_prev)
    if p.kind in SITGRU_FAMILY:
        return sitgru_step(p, x, h_prev)
    if p.kind is CellKind.GRU_NO_UPDATE:
        return noupdate_step(p, x, h_prev)
    return lstm_step(p, x, h_prev, c_prev)


def _batch(a: np.ndarray) -> np.ndarray:
    return a if a.ndim == 2 else a.reshape(1, -1)


def _accumulate(grads: dict, gate: str, da: np.ndarray, x: np.ndarray, h: np.ndarray) -> None:
    da2, x2, h2 = _batch(da), _batch(x), _batch(h)
    grads[f"W_{gate}"] += da2.T @ x2
    grads[f"U_{gate}"] += da2.T @ h2
    grads[f"b_{gate}"] += da2.sum(axis=0)


def cell_backward(state: CellState, d_h, kind: CellKind, d_c=None) -> CellGrads:
    """Gradients of a scalar loss through one step given upstream ``d_h``.

    For LSTM, ``d_c`` carries the gradient on the cell memory from the
    following step and the result's ``c_prev`` holds the one to pass back.
    """
    cache = state.cache
    if cache is None:
        raise CellStateError("cell state carries no forward cache")
    p = cache["params"]
    if cache["kind"] is not kind:
        raise CellStateError(f"cache from {cache['kind'].value} used with {kind.value} backward")
    d_h = np.asarray(d_h, dtype=np.float64)
    x, h_prev = cache["x"], cache["h_prev"]
    grads = {name: np.zeros_like(v) for name, v in p.tensors.items()}
    d_x = np.zeros_like(x)
    d_c_prev = None

    if kind is CellKind.GRU:
        z, r, hr, cand = cache["z"], cache["r"], cache["hr"], cache["cand"]
        d_z = d_h * (h_prev - cand)
        d_hprev = d_h * z
        da_h = d_h * (1.0 - z) * (1.0 - cand * cand)
        _accumulate(grads, "h", da_h, x, hr)
        d_x += da_h @ p["W_h"]
        d_hr = da_h @ p["U_h"]
        d_hprev = d_hprev + d_hr * r
        if not cache["reset_fixed"]:
            da_r = d_hr * h_prev * r * (1.0 - r)
            _accumulate(grads, "r", da_r, x, h_prev)
            d_x += da_r @ p["W_r"]
            d_hprev = d_hprev + da_r @ p["U_r"]
        da_z = d_z * z * (1.0 - z)
        _accumulate(grads, "z", da_z, x, h_prev)
        d_x += da_z @ p["W_z"]
        d_hprev = d_hprev + da_z @ p["U_z"]
    elif kind in SITGRU_FAMILY:
        z, cand = cache["z"], cache["cand"]
        da_z = d_h * (h_prev - cand) * z * (1.0 - z)
        da_h = d_h * (1.0 - z) * activation_grad(cand, CANDIDATE_ACTIVATION[kind])
        _accumulate(grads, "z", da_z, x, h_prev)
        _accumulate(grads, "h", da_h, x, h_prev)
        d_x += da_z @ p["W_z"] + da_h @ p["W_h"]
        d_hprev = d_h * z + da_z @ p["U_z"] + da_h @ p["U_h"]
    elif kind is CellKind.GRU_NO_UPDATE:
        # r_t and the candidate never reach h_t.
        d_hprev = d_h.copy()
    elif kind is CellKind.LSTM:
        i, f, o, g, tc, c_prev = (cache[k] for k in ("i", "f", "o", "g", "tc", "c_prev"))
        d_c = np.zeros_like(d_h) if d_c is None else np.asarray(d_c, dtype=np.float64)
        d_cell = d_c + d_h * o * (1.0 - tc * tc)
        pres = {
            "i": d_cell * g * i * (1.0 - i),
            "f": d_cell * c_prev * f * (1.0 - f),
            "o": d_h * tc * o * (1.0 - o),
            "g": d_cell * i * (1.0 - g * g),
        }
        d_hprev = np.zeros_like(h_prev)
        for gate, da in pres.items():
            _accumulate(grads, gate, da, x, h_prev)
            d_x += da @ p[f"W_{gate}"]
            d_hprev = d_hprev + da @ p[f"U_{gate}"]
        d_c_prev = d_cell * f
    else:
        raise ValueError(f"unknown cell kind {kind!r}")
    return CellGrads(grads, d_hprev, d_x, d_c_prev)


def unroll_sequence(p: CellParams, xs: Sequence, h0, kind: CellKind | None = None):
    """Run the cell over ``xs``; returns ``(states, h_T)``."""
    kind = p.kind if kind is None else kind
    if kind is not p.kind:
        raise ValueError(f"parameters are for {p.kind.value}, not {kind.value}")
    if len(xs) == 0:
        raise ValueError("cannot unroll an empty sequence")
    h = np.asarray(h0, dtype=np.float64)
    c = np.zeros_like(h) if kind is CellKind.LSTM else None
    states = []
    for x in xs:
        st = step(p, x, h, c)
        states.append(st)
        h, c = st.h, st.c
    return states, h


def backward_sequence(p: CellParams, states: Sequence[CellState], d_hs: Sequence) -> CellGrads:
    """Backpropagation through time over an unrolled sequence.

    ``d_hs[t]`` is the loss gradient arriving directly at ``states[t].h``.
    Parameter gradients are summed over steps; ``x`` of the result stacks the
    per-step input gradients along a leading time axis and ``h_prev`` is the
    gradient on the initial state.
    """
    if len(d_hs) != len(states):
        raise ValueError(f"{len(d_hs)} upstream gradients for {len(states)} steps")
    total = {name: np.zeros_like(v) for name, v in p.tensors.items()}
    d_xs = [None] * len(states)
    carry = np.zeros_like(states[-1].h)
    d_c = None
    for t in range(len(states) - 1, -1, -1):
        g = cell_backward(states[t], d_hs[t] + carry, p.kind, d_c)
        for name in total:
            total[name] += g.params[name]
        d_xs[t] = g.x
        carry = g.h_prev
        d_c = g.c_prev
    return CellGrads(total, carry, np.stack(d_xs), d_c)


def finite_diff_grad(p: CellParams, xs, h0, kind: CellKind | None,
                     loss: Callable[[list[np.ndarray]], float], eps: float = 1e-5) -> CellGrads:
    """Central-difference gradients of ``loss(hidden states)`` w.r.t. every parameter, h0 and xs."""
    kind = p.kind if kind is None else kind
    xs = np.array(xs, dtype=np.float64)
    h0 = np.array(h0, dtype=np.float64)

    def f() -> float:
        states, _ = unroll_sequence(p, list(xs), h0, kind)
        return float(loss([s.h for s in states]))

    def diff(arr: np.ndarray) -> np.ndarray:
        out = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), out.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + eps
            up = f()
            flat[k] = keep - eps
            down = f()
            flat[k] = keep
            gflat[k] = (up - down) / (2.0 * eps)
        return out

    p = p.copy()
    grads = {name: diff(p.tensors[name]) for name in p.names()}
    return CellGrads(grads, diff(h0), diff(xs))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest |a - n| / max(|a|, |n|) over components where either side exceeds ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale >= floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - n[mask]) / scale[mask]))
