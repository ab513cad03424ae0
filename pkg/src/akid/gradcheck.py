"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from akid.tensor import Tape, Tensor, precision


def numerical_gradient(fn: Callable[..., Tensor], points: list[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of scalar ``fn`` at each element of each point."""
    points = [np.array(p, dtype=np.float64) for p in points]
    grads = []
    for k, p in enumerate(points):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            plus = float(fn(*[Tensor(q, dtype=np.float64) for q in points]).item())
            p[idx] = orig - h
            minus = float(fn(*[Tensor(q, dtype=np.float64) for q in points]).item())
            p[idx] = orig
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def analytic_gradient(fn: Callable[..., Tensor], points: list[np.ndarray]) -> list[np.ndarray]:
    xs = [Tensor(p, requires_grad=True, dtype=np.float64) for p in points]
    with Tape() as tape:
        y = fn(*xs)
    if y.size != 1:
        raise ValueError(f"gradient check needs a scalar function, got shape {y.shape}")
    return tape.gradient(y, xs)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradient(fn: Callable[..., Tensor], point, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` is one array or a list of arrays, one per argument of ``fn``.
    Runs at 64-bit precision.
    """
    points = list(point) if isinstance(point, (list, tuple)) else [point]
    with precision(np.float64):
        analytic = analytic_gradient(fn, points)
        numeric = numerical_gradient(fn, points, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
