from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for bias-corrected Adam."""

    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.998
    eps: float = 1e-9
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step: params, grads and moment buffers differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(grads: Sequence[np.ndarray], lo: float = -3.0, hi: float = 3.0) -> None:
    """Clamp every gradient entry into [lo, hi] in place."""
    if not lo < hi:
        raise ValueError(f"empty clipping range [{lo}, {hi}]")
    for g in grads:
        np.clip(g, lo, hi, out=g)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()
