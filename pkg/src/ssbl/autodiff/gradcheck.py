"""Central finite-difference verification of adjoints (64-bit)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradcheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    per_input: list[float]

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def _rel(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-4,
    samples: int | None = None,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare backward() against central differences of a scalar function.

    ``fn`` receives one Tensor per input and returns a scalar Tensor. When
    ``samples`` is given, only that many randomly chosen elements per input
    are perturbed. Relative error is ``|a-n| / max(|a|, |n|, floor)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    leaves = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    if out.value.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    backward(out)

    def evaluate() -> float:
        return float(fn(*[Tensor(a) for a in arrays]).value)

    rng = np.random.default_rng(seed)
    per_input, worst_abs, checked = [], 0.0, 0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = rng.choice(flat.size, size=samples, replace=False)
        numeric = np.empty(idx.size)
        for n, j in enumerate(idx):
            keep = flat[j]
            flat[j] = keep + eps
            up = evaluate()
            flat[j] = keep - eps
            down = evaluate()
            flat[j] = keep
            numeric[n] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[idx]
        per_input.append(float(_rel(a, numeric, floor).max()) if idx.size else 0.0)
        worst_abs = max(worst_abs, float(np.abs(a - numeric).max()) if idx.size else 0.0)
        checked += idx.size
    return GradcheckReport(max(per_input, default=0.0), worst_abs, checked, per_input)
