"""Dense float64 matrix kernels with optional multiply-accumulate counting.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Every public op returns a fresh array and never mutates
its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when matrix shapes are incompatible or degenerate."""


@dataclass
class MacCounter:
    """Accumulates multiply-accumulate (MAC) units.

    One scalar multiply-add inside a matrix product is one unit. Elementwise
    work (softmax, sigmoid, scaling, residual adds) is never charged.
    """

    mac_count: int = 0

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError(f"MAC increment must be non-negative, got {n}")
        self.mac_count += int(n)


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a contiguous float64 2-D array, rejecting empty shapes."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must have positive dimensions, got {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray, counter: MacCounter | None = None,
           charge: int = 1) -> np.ndarray:
    """Matrix product ``a @ b``.

    When ``counter`` is given it is incremented by ``charge * m * k * n``.
    ``charge`` is 1 for ordinary MAC accounting; token-to-token interaction
    products are charged 2 by the attention code (see ``refgate.cost``).
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})")
    out = a @ b
    if counter is not None:
        counter.add(charge * a.shape[0] * a.shape[1] * b.shape[1])
    return out


def row_softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over each row (max-subtracted)."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, overflow-free for any finite input.

    Strictly inside (0, 1) as long as |x| stays below ~36; beyond that the
    float64 result rounds to the boundary.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only RNG used in the package."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def rand_matrix(rows: int, cols: int, rng: np.random.Generator,
                scale: float = 1.0) -> np.ndarray:
    """Uniform draws in [-scale, scale], shape (rows, cols)."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"rand_matrix needs rows, cols >= 1, got ({rows}, {cols})")
    u = rng.random((rows, cols))
    return (2.0 * u - 1.0) * scale


def split_heads(x: np.ndarray, heads: int) -> list[np.ndarray]:
    """Split columns into ``heads`` contiguous blocks of equal width."""
    if x.shape[1] % heads:
        raise DimensionError(f"width {x.shape[1]} not divisible by {heads} heads")
    dh = x.shape[1] // heads
    return [x[:, i * dh:(i + 1) * dh] for i in range(heads)]


def merge_heads(parts: list[np.ndarray]) -> np.ndarray:
    return np.ascontiguousarray(np.concatenate(parts, axis=1))
