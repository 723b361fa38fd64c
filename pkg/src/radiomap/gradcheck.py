"""Central finite-difference gradient checks for the autograd engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                   weight: np.ndarray | None = None) -> list[np.ndarray]:
    """Gradients of sum(weight * fn(*inputs)) from the tape."""
    inputs = [T.parameter(np.array(a, dtype=np.float64)) for a in arrays]
    out = fn(*inputs)
    w = np.ones(out.shape) if weight is None else weight
    T.backward(T.tsum(T.mul(out, w)))
    return [np.zeros_like(x.data) if x.grad is None else x.grad for x in inputs]


def numeric_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                  weight: np.ndarray | None = None, step: float = 1e-6) -> list[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def scalar() -> float:
        with T.no_grad():
            out = fn(*[Tensor(a) for a in arrays]).data
        return float(np.sum(out if weight is None else out * weight))

    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = scalar()
            flat[i] = orig - step
            down = scalar()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), or the absolute gap when both are ~0."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    gap = float(np.linalg.norm(a - b))
    return gap / scale if scale > 1e-8 else gap


def check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], seed: int = 0,
          step: float = 1e-6) -> float:
    """Worst relative error over all inputs, with a random output weighting."""
    with T.no_grad():
        shape = fn(*[Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]).shape
    weight = np.random.default_rng(seed).normal(size=shape)
    ana = analytic_grads(fn, arrays, weight)
    num = numeric_grads(fn, arrays, weight, step)
    return max(relative_error(a, n) for a, n in zip(ana, num))


def check_module(module, loss_fn: Callable[[], Tensor], n_coords: int | None = None,
                 seed: int = 0, step: float = 1e-6) -> float:
    """Compare tape gradients of ``loss_fn()`` w.r.t. ``module`` parameters
    against central differences, on all coordinates or a random subset."""
    params = module.parameters()
    module.zero_grad()
    T.backward(loss_fn())
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if n_coords is not None and n_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=n_coords, replace=False)
        coords = [coords[c] for c in np.sort(pick)]
    ana, num = np.empty(len(coords)), np.empty(len(coords))
    for c, (i, j) in enumerate(coords):
        p = params[i]
        ana[c] = 0.0 if p.grad is None else p.grad.reshape(-1)[j]
        orig = p.data.flat[j]
        with T.no_grad():
            p.data.flat[j] = orig + step
            up = float(loss_fn().data)
            p.data.flat[j] = orig - step
            down = float(loss_fn().data)
        p.data.flat[j] = orig
        num[c] = (up - down) / (2 * step)
    module.zero_grad()
    return relative_error(ana, num)
