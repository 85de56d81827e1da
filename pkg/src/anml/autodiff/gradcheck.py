"""Central finite differences, used as the independent oracle for backward()."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .engine import Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value).reshape(-1)[0])


def finite_difference_grad(f: Callable[[Tensor], object], x, epsilon: float = 1e-6) -> Tensor:
    """Central-difference estimate of df/dx for a scalar-valued ``f``.

    ``x`` is perturbed one coordinate at a time; ``f`` receives a fresh
    constant tensor each call and may itself call backward().  Use 64-bit
    inputs: 32-bit round-off swamps the difference quotient.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if base.dtype.kind != "f":
        base = base.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - epsilon
        lo = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * epsilon)
    return Tensor(grad)


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (Euclidean norms)."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
