"""Central finite-difference gradient verification.

The checker is the independent oracle for every analytic gradient in this
package: it re-evaluates the target function with coordinate perturbations
and never consults the autodiff graph for the numerical side.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["finite_diff_check", "relative_error"]


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|, 1e-8)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` is a closure evaluating a scalar from `params` (it must be
    deterministic and re-runnable). Requires float64 parameters; float32
    rounding would drown the comparison.

    `sample` limits the number of coordinates checked per parameter (all by
    default); coordinates are drawn by `rng` when sampling.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(
                f"finite_diff_check requires float64 params, got {p.data.dtype}"
            )
        if not p.requires_grad:
            raise ValueError("finite_diff_check: all params must require grad")
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    grads = []
    for p in params:
        if p.grad is None:
            raise ValueError("finite_diff_check: parameter unreachable from loss")
        grads.append(p.grad.copy())

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.size
        if sample is None or sample >= n:
            coords: Iterable[int] = range(n)
        else:
            coords = rng.choice(n, size=sample, replace=False)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
    return worst
