"""
Numerical helpers shared by geometry and observables.
- Richardson-extrapolated central differences for tensor-valued functions
- JAX import with 64-bit floats switched on
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from config import config

import jax

jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp  # noqa: E402  (x64 must be set first)


def central_difference(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float) -> np.ndarray:
    """Central difference of fn at x; derivative index is the LAST axis."""
    x = np.asarray(x, dtype=float)
    columns = []
    for k in range(x.shape[0]):
        e = np.zeros_like(x)
        e[k] = step
        columns.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * step))
    return np.stack(columns, axis=-1)


def richardson_derivative(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                          steps: Optional[Sequence[float]] = None) -> np.ndarray:
    """Jacobian of fn at x from two central differences with step ratio 2."""
    h1, h2 = steps if steps is not None else config.FD_STEPS
    coarse = central_difference(fn, x, h1)
    fine = central_difference(fn, x, h2)
    ratio = (h1 / h2) ** 2
    return (ratio * fine - coarse) / (ratio - 1.0)


def directional_difference(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                           direction: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Batched central difference of fn along direction (rows of x)."""
    return (fn(x + step * direction) - fn(x - step * direction)) / (2.0 * step)


__all__ = [
    "jax",
    "jnp",
    "central_difference",
    "richardson_derivative",
    "directional_difference",
]
