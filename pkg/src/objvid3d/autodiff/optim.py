"""Adam with bias correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """Apply one Adam update in place.

    Returns False (leaving params and state untouched) when any gradient is
    non-finite. Missing gradients are treated as zero.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    filled = []
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"grad dims {g.shape} do not match param dims {p.shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; Adam step skipped", p.name or p.shape)
            return False
        filled.append(g)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, filled, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return True


class Adam:
    """Thin stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: list[np.ndarray | None] | None = None) -> bool:
        if grads is None:
            grads = [p.grad for p in self.params]
        return adam_step(self.params, grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
