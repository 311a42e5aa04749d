"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``leaf`` (optionally a subset of flat indices)."""
    flat = leaf.data.reshape(-1)
    indices = range(flat.size) if index is None else np.asarray(index).reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(leaf.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Worst elementwise discrepancy, scaled by the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5, index=None) -> float:
    """Max relative error of ``fn``'s analytic gradient over ``leaves``."""
    for leaf in leaves:
        leaf.grad = None
    fn().backward()
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(fn, leaf, h, index)
        ana = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        if index is not None:
            sel = np.asarray(index).reshape(-1)
            ana, num = ana.reshape(-1)[sel], num.reshape(-1)[sel]
        worst = max(worst, max_rel_error(ana, num))
    return worst
