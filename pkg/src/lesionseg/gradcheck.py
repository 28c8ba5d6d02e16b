"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    checked_entries: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    stencil: int = 2,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection ``sum(r * out)``
    so every output element contributes. Inputs must be float64 and have
    ``requires_grad`` set. ``max_entries`` caps the number of coordinates
    perturbed per input (sampled without replacement).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)

    def objective() -> float:
        return float(np.sum(fn(*inputs).data * proj))

    for t in inputs:
        t.grad = None
    out.backward(proj.astype(np.float64))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    per_input = []
    checked = 0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]

            def at(step: float) -> float:
                flat[i] = orig + step
                return objective()

            if stencil == 2:
                num[j] = (at(h) - at(-h)) / (2 * h)
            else:
                num[j] = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
            flat[i] = orig
        err = relative_error(ga.reshape(-1)[idx], num)
        per_input.append(float(err.max()) if err.size else 0.0)
        checked += idx.size
    return GradCheckReport(max(per_input, default=0.0), per_input, checked, tol)
