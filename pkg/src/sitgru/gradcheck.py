"""Finite-difference verification of the analytic cell and network gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cells import CellKind, CellParams, backward_sequence, finite_diff_grad, max_relative_error, unroll_sequence
from .network import NetworkConfig, backward_cuboid, forward_cuboid, init_model
from .optim import LossKind, loss_value_and_grad
from .rng import derive_rng

TOLERANCE = 1e-4
EPS = 1e-5
MIN_MAGNITUDE = 1e-8


def resolution_floor(loss_value: float) -> float:
    """Smallest gradient magnitude central differences can resolve to TOLERANCE.

    Rounding in ``f(x + eps) - f(x - eps)`` leaves an absolute error of about
    ``ulp * |f| / eps``; below the returned level that error alone exceeds
    the relative tolerance.
    """
    return max(MIN_MAGNITUDE, np.finfo(float).eps * abs(loss_value) / (EPS * TOLERANCE))


@dataclass
class CheckResult:
    kind: CellKind
    scope: str  # "cell" or "network"
    worst: float
    where: str
    skipped: int = 0  # components below the resolution floor

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def _random_cell(kind: CellKind, d: int, n: int, rng: np.random.Generator) -> CellParams:
    p = CellParams.init(kind, d, n, rng)
    for v in p.tensors.values():
        v += rng.normal(scale=0.5, size=v.shape)
    return p


def check_cell(kind: CellKind, seed: int, T: int = 4, d: int = 2, n: int = 3,
               mutate: Callable[[dict], None] | None = None) -> CheckResult:
    """Compare BPTT gradients with central differences for ``sum_t w_t.h_t + 0.5|h_t|^2``."""
    rng = derive_rng(seed, f"gradcheck-cell-{kind.value}")
    p = _random_cell(kind, d, n, rng)
    xs = rng.normal(size=(T, d))
    h0 = rng.uniform(0.0, 1.0, size=n)
    w = rng.normal(size=(T, n))

    def loss(hs):
        return sum(float(w[t] @ hs[t] + 0.5 * hs[t] @ hs[t]) for t in range(T))

    states, _ = unroll_sequence(p, list(xs), h0, kind)
    floor = resolution_floor(loss([s.h for s in states]))
    analytic = backward_sequence(p, states, [w[t] + states[t].h for t in range(T)])
    grads = dict(analytic.params, h0=analytic.h_prev, xs=analytic.x)
    if mutate is not None:
        mutate(grads)
    numeric = finite_diff_grad(p, xs, h0, kind, loss, EPS)
    ref = dict(numeric.params, h0=numeric.h_prev, xs=numeric.x)
    return _worst(kind, "cell", grads, ref, floor)


def check_network(kind: CellKind, seed: int, units=(3, 2, 1), frame_pixels: int = 4, T: int = 3,
                  batch: int = 2, mutate: Callable[[dict], None] | None = None) -> CheckResult:
    """End-to-end check of a downscaled encoder-decoder under an MSE reconstruction loss."""
    rng = derive_rng(seed, f"gradcheck-net-{kind.value}")
    m = init_model(NetworkConfig(list(units), kind, frame_pixels=frame_pixels, T=T), rng)
    for v in m.parameters().values():
        v += rng.normal(scale=0.3, size=v.shape)
    x = rng.uniform(0.0, 1.0, size=(batch, T, frame_pixels))
    target = rng.uniform(0.0, 1.0, size=x.shape)

    def loss() -> float:
        recon, _ = forward_cuboid(m, x, True, update_running=False)
        return loss_value_and_grad(LossKind.MSE, recon, target)[0]

    recon, cache = forward_cuboid(m, x, True, update_running=False)
    value, d_recon = loss_value_and_grad(LossKind.MSE, recon, target)
    grads = backward_cuboid(m, cache, d_recon)
    if mutate is not None:
        mutate(grads)
    numeric = {}
    for name, v in m.parameters().items():
        g = np.zeros_like(v)
        flat, gflat = v.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + EPS
            up = loss()
            flat[k] = keep - EPS
            down = loss()
            flat[k] = keep
            gflat[k] = (up - down) / (2 * EPS)
        numeric[name] = g
    return _worst(kind, "network", grads, numeric, resolution_floor(value))


def _worst(kind, scope, analytic: dict, numeric: dict, floor: float) -> CheckResult:
    worst, where, skipped = 0.0, "", 0
    for name, ref in numeric.items():
        err = max_relative_error(analytic[name], ref, floor)
        skipped += int(np.sum(np.maximum(np.abs(analytic[name]), np.abs(ref)) < floor))
        if err > worst or not where:
            worst, where = max(err, worst), name
    return CheckResult(kind, scope, worst, where, skipped)


def flip_first_sign(grads: dict) -> None:
    """Mutation used to confirm the checker notices a wrong gradient."""
    for g in grads.values():
        if np.any(g != 0):
            np.negative(g, out=g)
            return


def run(kinds=tuple(CellKind), seeds: int = 20, mutate=None) -> list[CheckResult]:
    results = []
    for kind in kinds:
        for seed in range(seeds):
            results.append(check_cell(kind, seed, mutate=mutate))
            results.append(check_network(kind, seed, mutate=mutate))
    return results
