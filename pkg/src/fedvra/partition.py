"""Client data partitions, heterogeneous quadratic families and local-update schedules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .objectives import Quadratic, Shard, make_quadratic

MAX_PARTITION_RETRIES = 100


class PartitionError(RuntimeError):
    """Raised when no partition without empty shards was found within the retry budget."""


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    N: int = 1
    alpha: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ValueError("alpha must be positive")


def _assign_iid(labels, N, rng):
    return rng.integers(0, N, size=labels.size)


def _assign_dirichlet(labels, N, alpha, rng):
    owner = np.empty(labels.size, dtype=np.int64)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(N, alpha))
        cuts = np.round(np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            owner[part] = client
    return owner


def partition_indices(labels: np.ndarray, spec: PartitionSpec) -> List[np.ndarray]:
    """Per-client sorted sample indices; see :func:`partition`."""
    labels = np.asarray(labels)
    if spec.N > labels.size:
        raise PartitionError(f"cannot give {spec.N} clients at least one of {labels.size} samples")
    rng = np.random.default_rng(spec.seed)
    for _ in range(MAX_PARTITION_RETRIES):
        if spec.mode == "iid":
            owner = _assign_iid(labels, spec.N, rng)
        else:
            owner = _assign_dirichlet(labels, spec.N, spec.alpha, rng)
        counts = np.bincount(owner, minlength=spec.N)
        if np.all(counts > 0):
            return [np.flatnonzero(owner == i) for i in range(spec.N)]
    raise PartitionError(f"no partition without empty shards after {MAX_PARTITION_RETRIES} draws")


def partition(dataset: Shard, spec: PartitionSpec) -> List[Shard]:
    """Split a labeled dataset into ``spec.N`` disjoint, non-empty shards.

    ``iid`` sends every sample to a uniformly random client.  ``dirichlet``
    draws, for each class, client proportions from ``Dirichlet(alpha 1_N)`` and
    hands out that class's shuffled samples accordingly.  A draw that leaves
    some client empty is discarded and the whole partition redrawn.
    """
    if dataset.labels is None:
        raise ValueError("partitioning needs a labeled dataset")
    return [dataset.subset(idx) for idx in partition_indices(dataset.labels, spec)]


def top_k_class_mass(shard: Shard, k: int = 2) -> float:
    """Fraction of the shard's samples that fall in its ``k`` most frequent classes."""
    counts = np.sort(np.bincount(shard.labels))[::-1]
    return float(counts[:k].sum() / shard.n)


def client_weights(shards_or_sizes: Sequence, mode: str = "data") -> np.ndarray:
    """Aggregation weights: proportional to shard size (``"data"``) or ``"uniform"``; sum to 1."""
    sizes = np.array([s.n if isinstance(s, Shard) else s for s in shards_or_sizes], dtype=np.float64)
    if mode == "uniform":
        return np.full(sizes.size, 1.0 / sizes.size)
    if mode != "data":
        raise ValueError(f"unknown weight mode {mode!r}")
    return sizes / sizes.sum()


def _balanced_directions(N: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """``N`` unit vectors in R^d whose plain average is zero.

    Built from antithetic pairs ``(u, -u)`` plus, for odd ``N``, one triple of
    unit vectors at 120 degrees in a random plane.
    """
    if N == 1:
        return np.zeros((1, d))
    if N % 2 == 1 and d == 1:
        raise ValueError("odd client counts need d >= 2 for zero-mean unit directions")
    dirs = []
    pairs = N // 2 - (1 if N % 2 == 1 else 0)
    for _ in range(pairs):
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        dirs.extend([u, -u])
    if N % 2 == 1:
        q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
        for ang in (0.0, 2 * np.pi / 3, 4 * np.pi / 3):
            dirs.append(np.cos(ang) * q[:, 0] + np.sin(ang) * q[:, 1])
    dirs = np.array(dirs)
    return dirs[rng.permutation(N)]


def synth_quadratic_family(N: int, d: int, heterogeneity: float, seed: int,
                           center: Optional[np.ndarray] = None, curvature: str = "identity",
                           curvature_range: tuple = (0.5, 2.0)) -> List[Quadratic]:
    """``N`` quadratics ``0.5 (x - c_i)^T A_i (x - c_i)`` with spread-out minimizers.

    ``c_i = c_bar + heterogeneity * u_i`` where the ``u_i`` are unit vectors
    averaging to zero, so under uniform weights the mean minimizer is
    ``c_bar`` (the origin unless ``center`` is given).  With identity
    curvature ``(1/N) sum ||grad f_i(c_bar)||^2 = heterogeneity^2``.
    ``curvature="random"`` draws ``A_i = V diag(s) V^T`` with eigenvalues
    uniform in ``curvature_range``.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if N < 1:
        raise ValueError("N must be at least 1")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be non-negative")
    rng = np.random.default_rng(seed)
    c_bar = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
    U = _balanced_directions(N, d, rng) if heterogeneity > 0 else np.zeros((N, d))
    family = []
    for i in range(N):
        if curvature == "identity":
            A = np.eye(d)
        elif curvature == "random":
            V, _ = np.linalg.qr(rng.standard_normal((d, d)))
            s = rng.uniform(*curvature_range, size=d)
            A = (V * s) @ V.T
            A = 0.5 * (A + A.T)
        else:
            raise ValueError(f"unknown curvature mode {curvature!r}")
        family.append(make_quadratic(A, c_bar + heterogeneity * U[i]))
    return family


def hlu_schedule(N: int, R: int, mode: str = "fixed", Q: int = 2, lo: int = 1, hi: int = 5,
                 seed: int = 0) -> np.ndarray:
    """``(R, N)`` table of local update counts.

    ``mode="fixed"`` repeats ``Q``; ``mode="uniform"`` draws integers uniformly
    from ``[lo, hi]`` inclusive.
    """
    if mode == "fixed":
        if Q < 1:
            raise ValueError("Q must be at least 1")
        return np.full((R, N), int(Q), dtype=np.int64)
    if mode != "uniform":
        raise ValueError(f"unknown schedule mode {mode!r}")
    if lo < 1:
        raise ValueError("lo must be at least 1")
    if lo > hi:
        raise ValueError("lo exceeds hi")
    return np.random.default_rng(seed).integers(lo, hi + 1, size=(R, N))


def epochs_to_steps(epochs: np.ndarray, shard_sizes: Sequence[int], S: Optional[int]) -> np.ndarray:
    """Convert an epoch table to local step counts, ``epochs * ceil(n_i / S)``.

    With full-batch gradients (``S=None``) one epoch is one step.
    """
    sizes = np.asarray(shard_sizes, dtype=np.int64)
    per_epoch = np.ones_like(sizes) if S is None else -(-sizes // int(S))
    return np.asarray(epochs, dtype=np.int64) * per_epoch[None, :]


def gaussian_class_dataset(num_samples: int, num_classes: int, seed: int, dim: int = 2,
                           radius: float = 3.0, spread: float = 1.0) -> Shard:
    """Balanced labelled Gaussian blobs with class means evenly spaced on a circle.

    The first two coordinates carry the class signal; any further ones are
    pure noise.  Labels cycle through the classes before shuffling, so class
    counts differ by at most one.
    """
    if num_samples < num_classes or num_classes < 2:
        raise ValueError("need num_classes >= 2 and at least one sample per class")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    ang = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0], means[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
    X = means[labels] + spread * rng.standard_normal((num_samples, dim))
    return Shard(X, labels)
