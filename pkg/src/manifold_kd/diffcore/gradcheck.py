"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(a, f) -> np.ndarray:
    """``|a - f| / max(1, |a|, |f|)``, elementwise."""
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = fn(*inputs)
    tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]


def grad_check(fn: Callable[..., Tensor], point, tol: float = 1e-4, step: float = 1e-5,
               max_elems: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn`` with central differences.

    ``point`` is a tensor or a sequence of tensors passed positionally to
    ``fn``.  With ``max_elems`` only that many coordinates per input are
    probed (chosen with a seeded generator); otherwise all of them.
    """
    inputs = [point] if isinstance(point, Tensor) else list(point)
    grads = analytic_grads(fn, inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    per_input = []
    checked = 0
    for t, g in zip(inputs, grads):
        flat = t.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            coords = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        err = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*inputs).item()
            flat[i] = orig - step
            lo = fn(*inputs).item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            err = max(err, float(rel_error(g.reshape(-1)[i], fd)))
            checked += 1
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(worst, tol, per_input, checked)
