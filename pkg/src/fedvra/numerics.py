"""Dense vector helpers and the projections used by the constrained variant.

Parameter vectors are plain 1-d ``float64`` numpy arrays throughout the
package; the helpers here only add shape checks and a finiteness guard.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a vector acquires a NaN or infinite entry."""


def as_vector(v, copy: bool = False) -> np.ndarray:
    """Return ``v`` as a finite 1-d float64 array."""
    arr = np.array(v, dtype=np.float64, copy=copy) if copy else np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("vectors must have positive dimension")
    check_finite(arr)
    return arr


def check_finite(v: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{what} has non-finite entries")
    return v


def lincomb(coeffs: Sequence[float], vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Return ``sum_k coeffs[k] * vectors[k]``."""
    if len(coeffs) != len(vectors):
        raise ValueError("coeffs and vectors differ in length")
    if len(vectors) == 0:
        raise ValueError("lincomb needs at least one vector")
    vs = [as_vector(v) for v in vectors]
    dim = vs[0].size
    if any(v.size != dim for v in vs):
        raise ValueError("dimension mismatch in lincomb")
    out = np.zeros(dim)
    for c, v in zip(coeffs, vs):
        out += float(c) * v
    return check_finite(out, "lincomb result")


def norm_sq(v: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.dot(v, v))


@dataclass(frozen=True)
class BoxSet:
    """Coordinatewise interval constraint ``lower <= x <= upper``.

    ``lower`` and ``upper`` may be scalars (broadcast to every coordinate)
    or arrays; infinite bounds are allowed.
    """

    lower: float | np.ndarray
    upper: float | np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")

    @classmethod
    def symmetric(cls, radius: float) -> "BoxSet":
        return cls(-float(radius), float(radius))

    @classmethod
    def unbounded(cls) -> "BoxSet":
        return cls(-np.inf, np.inf)

    def contains(self, v: np.ndarray) -> bool:
        v = np.asarray(v)
        return bool(np.all(v >= self.lower) and np.all(v <= self.upper))


@dataclass(frozen=True)
class SimplexProductSet:
    """Product of ``block_count`` probability simplices of size ``block_size``."""

    block_size: int
    block_count: int

    def __post_init__(self):
        if self.block_size < 1 or self.block_count < 1:
            raise ValueError("block_size and block_count must be positive")

    @property
    def dim(self) -> int:
        return self.block_size * self.block_count

    def contains(self, v: np.ndarray, tol: float = 1e-12) -> bool:
        blocks = np.asarray(v, dtype=np.float64).reshape(self.block_count, self.block_size)
        return bool(np.all(blocks >= 0.0) and np.all(np.abs(blocks.sum(axis=1) - 1.0) <= tol))


def project_box(v: np.ndarray, box: BoxSet) -> np.ndarray:
    v = as_vector(v)
    lo = np.asarray(box.lower, dtype=np.float64)
    hi = np.asarray(box.upper, dtype=np.float64)
    if (lo.ndim and lo.size != v.size) or (hi.ndim and hi.size != v.size):
        raise ValueError("box and vector dimensions differ")
    return np.minimum(np.maximum(v, lo), hi)


def _project_rows_onto_simplex(rows: np.ndarray) -> np.ndarray:
    # sort-and-threshold: find the largest k with u_k > (sum_{j<=k} u_j - 1) / k
    u = -np.sort(-rows, axis=1)
    k = rows.shape[1]
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = np.count_nonzero(cond, axis=1)
    theta = css[np.arange(rows.shape[0]), rho - 1] / rho
    return np.maximum(rows - theta[:, None], 0.0)


def project_simplex_product(v: np.ndarray, sps: SimplexProductSet) -> np.ndarray:
    """Euclidean projection of each consecutive block onto the probability simplex."""
    v = as_vector(v)
    if v.size != sps.dim:
        raise ValueError(f"vector of size {v.size} does not match simplex product of size {sps.dim}")
    rows = v.reshape(sps.block_count, sps.block_size)
    return _project_rows_onto_simplex(rows).reshape(-1)
