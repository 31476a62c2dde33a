from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers keyed by parameter position, plus hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Iterable[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are cleared afterwards.

    Parameters without a gradient are treated as having a zero gradient.
    """
    params = list(params)
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed between Adam steps")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"moment buffer {m.shape} does not match parameter {p.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = (p.value - update).astype(p.value.dtype, copy=False)
        p.grad = None
