"""Central finite-difference verification of tape gradients.

The checker is the independent oracle for every differentiable op: it knows
nothing about vector-Jacobian products, it only re-runs forward passes with
perturbed inputs.  Checks run in float64 with step 1e-3; an element passes
when |analytic - numeric| <= max(atol, rtol * max(|analytic|, |numeric|)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward

EPS = 1e-3
RTOL = 1e-4
ATOL = 1e-6


@dataclass
class GradCheckResult:
    name: str
    passed: bool
    worst_rel: float
    per_input: dict[str, float] = field(default_factory=dict)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} worst rel err {self.worst_rel:.3e}"


def finite_difference(fn: Callable[[dict[str, Tensor]], Tensor],
                      tensors: dict[str, Tensor], eps: float = EPS) -> dict[str, np.ndarray]:
    """Numeric gradient of a scalar-valued fn for every entry of ``tensors``."""
    grads = {}
    for name, t in tensors.items():
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + eps
            plus = {**tensors, name: Tensor(bumped.reshape(t.dims))}
            bumped[i] = flat[i] - eps
            minus = {**tensors, name: Tensor(bumped.reshape(t.dims))}
            g.reshape(-1)[i] = (fn(plus).item() - fn(minus).item()) / (2.0 * eps)
        grads[name] = g
    return grads


def _worst_rel(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return float((np.abs(analytic - numeric) / scale).max()) if analytic.size else 0.0


def gradcheck(name: str,
              build: Callable[[np.random.Generator], tuple[Callable, dict[str, Tensor]]],
              trials: int = 1, seed: int = 0,
              eps: float = EPS, rtol: float = RTOL, atol: float = ATOL) -> GradCheckResult:
    """Compare tape gradients with central finite differences.

    ``build(rng)`` returns ``(fn, tensors)`` where ``fn(tensors)`` produces a
    scalar Tensor; every tensor in the dict is treated as differentiable.
    Inputs should be drawn in float64, offset away from activation kinks.
    """
    per_input: dict[str, float] = {}
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(trial,)))
        fn, tensors = build(rng)
        for t in tensors.values():
            t.requires_grad = True
        with Tape() as tape:
            loss = fn(tensors)
        backward(tape, loss, params=list(tensors.values()))
        analytic = {k: t.grad for k, t in tensors.items()}
        for t in tensors.values():
            t.requires_grad = False
        numeric = finite_difference(fn, tensors, eps)
        for k in tensors:
            err = _worst_rel(analytic[k], numeric[k], rtol, atol)
            per_input[k] = max(per_input.get(k, 0.0), err)
    worst = max(per_input.values()) if per_input else 0.0
    return GradCheckResult(name=name, passed=worst <= rtol, worst_rel=worst, per_input=per_input)
