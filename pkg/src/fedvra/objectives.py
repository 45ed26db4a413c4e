"""Local cost functions with full and mini-batch gradients.

Each objective is the average of per-sample terms over a data shard, so a
mini-batch gradient is the mean of per-sample gradients over sampled indices
and is unbiased for the full gradient.  Sampling is i.i.d. uniform with
replacement unless a :class:`BatchSampler` in ``"epoch"`` mode is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .numerics import BoxSet, SimplexProductSet, as_vector


@dataclass
class Shard:
    """A client's data: ``features`` is ``(n, feature_dim)``, ``labels`` optional ints."""

    features: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if self.features.shape[0] < 1:
            raise ValueError("a shard needs at least one sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("labels must have one entry per sample")
            if np.any(self.labels < 0):
                raise ValueError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Shard":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Shard(self.features[idx], labels)


def effective_batch(S: Optional[int], n: int) -> Optional[int]:
    """Batch size used on a shard of ``n`` samples: ``min(S, n)``, ``None`` meaning full batch."""
    return None if S is None else min(int(S), n)


class BatchSampler:
    """Draws index batches for one local round.

    ``mode="iid"`` samples each batch uniformly with replacement.  ``mode="epoch"``
    walks a fresh permutation of the shard and reshuffles when it is exhausted.
    ``S=None`` means full-batch gradients (``next`` returns ``None``).
    """

    def __init__(self, n: int, S: Optional[int], rng: np.random.Generator, mode: str = "iid"):
        if mode not in ("iid", "epoch"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        if S is not None and not 1 <= S <= n:
            raise ValueError(f"batch size {S} outside [1, {n}]")
        self.n, self.S, self.rng, self.mode = n, S, rng, mode
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> Optional[np.ndarray]:
        if self.S is None:
            return None
        if self.mode == "iid":
            return self.rng.integers(0, self.n, size=self.S)
        if self._pos + self.S > self._perm.size:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.S]
        self._pos += self.S
        return idx


class Objective:
    """Base class: ``f(x) = (1/n) sum_j f(x; xi_j)``.

    Subclasses implement :meth:`loss`, :meth:`full_grad` and :meth:`batch_grad`
    and set ``n``, ``dim`` and ``smoothness_L``.
    """

    n: int
    dim: int
    lower_bound: Optional[float] = 0.0
    variance_bound_sigma2: Optional[float] = None

    def loss(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def batch_grad(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Mean of per-sample gradients over ``idx`` (repeats allowed)."""
        raise NotImplementedError

    @property
    def smoothness_L(self) -> float:
        raise NotImplementedError

    def stoch_grad(self, x: np.ndarray, S: Optional[int], rng: np.random.Generator,
                   exhaustive: bool = False) -> np.ndarray:
        return stoch_grad(self, x, S, rng, exhaustive)

    def grad(self, x: np.ndarray, idx: Optional[np.ndarray]) -> np.ndarray:
        return self.full_grad(x) if idx is None else self.batch_grad(x, idx)

    def per_sample_grads(self, x: np.ndarray) -> np.ndarray:
        return np.stack([self.batch_grad(x, np.array([j])) for j in range(self.n)])

    def sample_variance(self, x: np.ndarray) -> float:
        """``(1/n) sum_j ||grad_j(x) - grad(x)||^2`` at ``x``."""
        g = self.per_sample_grads(x)
        return float(np.mean(np.sum((g - g.mean(axis=0)) ** 2, axis=1)))


def stoch_grad(obj: Objective, x: np.ndarray, S: Optional[int], rng: np.random.Generator,
               exhaustive: bool = False) -> np.ndarray:
    """Mini-batch gradient over ``S`` indices drawn i.i.d. with replacement.

    ``S=None`` returns the full gradient, as does ``S == n`` with
    ``exhaustive=True`` (one pass over every sample, no draw).
    """
    if S is None:
        return obj.full_grad(x)
    if not 1 <= S <= obj.n:
        raise ValueError(f"batch size {S} outside [1, {obj.n}]")
    if exhaustive and S == obj.n:
        return obj.full_grad(x)
    return obj.batch_grad(x, rng.integers(0, obj.n, size=S))


# ---------------------------------------------------------------------------
# quadratic


class Quadratic(Objective):
    """``f(x) = 0.5 (x - c)^T A (x - c)`` with ``A = sum_j a_j a_j^T``.

    The rank-one terms are the samples: sample ``j`` contributes the gradient
    ``n a_j a_j^T (x - c)`` so that averaging over samples recovers ``A (x - c)``.
    """

    def __init__(self, A: np.ndarray, c: np.ndarray, factors: Optional[np.ndarray] = None):
        A = np.asarray(A, dtype=np.float64)
        c = as_vector(c, copy=True)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if A.shape[0] != c.size:
            raise ValueError("A and c dimensions differ")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ValueError("A must be symmetric")
        w, V = np.linalg.eigh(A)
        if w[0] < -1e-10 * max(1.0, abs(w[-1])):
            raise ValueError("A must be positive semidefinite")
        if factors is None:
            factors = np.sqrt(np.clip(w, 0.0, None))[:, None] * V.T
        factors = np.asarray(factors, dtype=np.float64)
        if factors.ndim != 2 or factors.shape[1] != c.size:
            raise ValueError("factors must be (n, dim)")
        self.A = 0.5 * (A + A.T)
        self.c = c
        self.factors = factors
        self.n, self.dim = factors.shape[0], c.size
        self._L = float(max(w[-1], 0.0))

    @property
    def smoothness_L(self) -> float:
        return self._L

    def loss(self, x):
        r = x - self.c
        return 0.5 * float(r @ self.A @ r)

    def full_grad(self, x):
        return self.A @ (x - self.c)

    def batch_grad(self, x, idx):
        F = self.factors[idx]
        return (self.n / len(idx)) * (F.T @ (F @ (x - self.c)))

    def per_sample_grads(self, x):
        proj = self.factors @ (x - self.c)
        return self.n * proj[:, None] * self.factors


def make_quadratic(A: np.ndarray, c: np.ndarray, factors: Optional[np.ndarray] = None) -> Quadratic:
    return Quadratic(A, c, factors)


# ---------------------------------------------------------------------------
# logistic regression


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


class Logistic(Objective):
    """L2-regularized logistic loss, binary or one-vs-rest over ``num_classes``.

    Parameters are a ``(K, p [+1])`` weight matrix flattened row-major, with
    ``K = 1`` in the binary case.  The loss sums the per-class binary
    cross-entropies, which keeps ``||X||^2 / (4n) + mu`` a valid smoothness bound.
    """

    def __init__(self, shard: Shard, l2_mu: float = 0.0, num_classes: Optional[int] = None,
                 fit_intercept: bool = True):
        if shard.labels is None:
            raise ValueError("logistic regression needs labels")
        if l2_mu < 0:
            raise ValueError("l2_mu must be non-negative")
        K = int(num_classes) if num_classes is not None else int(shard.labels.max()) + 1
        K = max(K, 2)
        if shard.labels.max() >= K:
            raise ValueError("labels exceed num_classes")
        X = shard.features
        if fit_intercept:
            X = np.hstack([X, np.ones((X.shape[0], 1))])
        self.X = X
        self.labels = shard.labels
        self.num_classes = K
        self.fit_intercept = fit_intercept
        self.l2_mu = float(l2_mu)
        self.rows = 1 if K == 2 else K
        if K == 2:
            self.T = self.labels[:, None].astype(np.float64)
        else:
            self.T = np.eye(K)[self.labels]
        self.n = X.shape[0]
        self.dim = self.rows * X.shape[1]

    @cached_property
    def smoothness_L(self) -> float:
        op = np.linalg.norm(self.X, 2)
        return op ** 2 / (4.0 * self.n) + self.l2_mu

    def _W(self, x):
        return x.reshape(self.rows, self.X.shape[1])

    def _loss_on(self, x, X, T):
        Z = X @ self._W(x).T
        ce = np.logaddexp(0.0, Z) - T * Z
        return float(ce.sum(axis=1).mean()) + 0.5 * self.l2_mu * float(x @ x)

    def _grad_on(self, x, X, T):
        Z = X @ self._W(x).T
        R = (_sigmoid(Z) - T) / X.shape[0]
        return (R.T @ X).reshape(-1) + self.l2_mu * x

    def loss(self, x):
        return self._loss_on(x, self.X, self.T)

    def full_grad(self, x):
        return self._grad_on(x, self.X, self.T)

    def batch_grad(self, x, idx):
        return self._grad_on(x, self.X[idx], self.T[idx])

    def predict(self, x, features):
        F = np.asarray(features, dtype=np.float64)
        if self.fit_intercept:
            F = np.hstack([F, np.ones((F.shape[0], 1))])
        Z = F @ self._W(x).T
        if self.rows == 1:
            return (Z[:, 0] > 0).astype(np.int64)
        return np.argmax(Z, axis=1)

    def accuracy(self, x, shard: Shard) -> float:
        return float(np.mean(self.predict(x, shard.features) == shard.labels))


def make_logistic(shard: Shard, l2_mu: float = 0.0, num_classes: Optional[int] = None,
                  fit_intercept: bool = True) -> Logistic:
    return Logistic(shard, l2_mu, num_classes, fit_intercept)


# ---------------------------------------------------------------------------
# one-hidden-layer tanh network


def estimate_smoothness(obj: Objective, rng: np.random.Generator, center: np.ndarray,
                        radius: float = 1.0, pairs: int = 20, safety: float = 2.0) -> float:
    """Largest observed ``||grad(u) - grad(v)|| / ||u - v||`` over random probe pairs, times ``safety``."""
    best = 0.0
    for _ in range(pairs):
        u = center + radius * rng.standard_normal(center.size) / np.sqrt(center.size)
        v = u + 1e-2 * radius * rng.standard_normal(center.size) / np.sqrt(center.size)
        du = np.linalg.norm(u - v)
        best = max(best, np.linalg.norm(obj.full_grad(u) - obj.full_grad(v)) / du)
    return safety * best


class MLP(Objective):
    """Softmax classifier with one tanh hidden layer and hand-coded backprop.

    Parameters are ``[W1 (h, p), b1 (h), W2 (K, h), b2 (K)]`` flattened.
    """

    def __init__(self, shard: Shard, hidden_width: int = 200, num_classes: Optional[int] = None,
                 l2_mu: float = 0.0, smoothness_seed: int = 0):
        if shard.labels is None:
            raise ValueError("the MLP objective needs labels")
        K = int(num_classes) if num_classes is not None else int(shard.labels.max()) + 1
        if shard.labels.max() >= K:
            raise ValueError("labels exceed num_classes")
        if hidden_width < 1:
            raise ValueError("hidden_width must be positive")
        self.X = shard.features
        self.labels = shard.labels
        self.T = np.eye(K)[self.labels]
        self.p, self.h, self.K = self.X.shape[1], int(hidden_width), K
        self.l2_mu = float(l2_mu)
        self.n = self.X.shape[0]
        self.dim = self.h * self.p + self.h + self.K * self.h + self.K
        self._smoothness_seed = smoothness_seed

    def unpack(self, x):
        p, h, K = self.p, self.h, self.K
        o = 0
        W1 = x[o:o + h * p].reshape(h, p); o += h * p
        b1 = x[o:o + h]; o += h
        W2 = x[o:o + K * h].reshape(K, h); o += K * h
        b2 = x[o:o + K]
        return W1, b1, W2, b2

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        lim1 = np.sqrt(6.0 / (self.p + self.h))
        lim2 = np.sqrt(6.0 / (self.h + self.K))
        return np.concatenate([
            rng.uniform(-lim1, lim1, self.h * self.p), np.zeros(self.h),
            rng.uniform(-lim2, lim2, self.K * self.h), np.zeros(self.K),
        ])

    def _forward(self, x, X):
        W1, b1, W2, b2 = self.unpack(x)
        H = np.tanh(X @ W1.T + b1)
        Z = H @ W2.T + b2
        Z = Z - Z.max(axis=1, keepdims=True)
        logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
        return H, logp

    def _loss_on(self, x, X, T):
        _, logp = self._forward(x, X)
        return float(-(T * logp).sum(axis=1).mean()) + 0.5 * self.l2_mu * float(x @ x)

    def _grad_on(self, x, X, T):
        W1, b1, W2, b2 = self.unpack(x)
        H, logp = self._forward(x, X)
        dZ = (np.exp(logp) - T) / X.shape[0]
        gW2 = dZ.T @ H
        gb2 = dZ.sum(axis=0)
        dA = (dZ @ W2) * (1.0 - H * H)
        gW1 = dA.T @ X
        gb1 = dA.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2]) + self.l2_mu * x

    def loss(self, x):
        return self._loss_on(x, self.X, self.T)

    def full_grad(self, x):
        return self._grad_on(x, self.X, self.T)

    def batch_grad(self, x, idx):
        return self._grad_on(x, self.X[idx], self.T[idx])

    @cached_property
    def smoothness_L(self) -> float:
        rng = np.random.default_rng(self._smoothness_seed)
        center = self.initial_point(rng)
        return estimate_smoothness(self, rng, center, radius=float(np.linalg.norm(center)) or 1.0)

    def predict(self, x, features):
        _, logp = self._forward(x, np.asarray(features, dtype=np.float64))
        return np.argmax(logp, axis=1)

    def accuracy(self, x, shard: Shard) -> float:
        return float(np.mean(self.predict(x, shard.features) == shard.labels))


def make_mlp(shard: Shard, hidden_width: int = 200, num_classes: Optional[int] = None,
             l2_mu: float = 0.0) -> MLP:
    return MLP(shard, hidden_width, num_classes, l2_mu)


# ---------------------------------------------------------------------------
# two-block soft clustering


class BlockObjective:
    """Interface for ``f(x, y)`` with a shared block ``x`` and a private block ``y``."""

    n: int
    x_dim: int
    y_dim: int
    lower_bound: Optional[float] = 0.0

    def loss(self, x, y) -> float:
        raise NotImplementedError

    def grad_x(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def grad_y(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def batch_grad_x(self, x, y, idx) -> np.ndarray:
        raise NotImplementedError

    def batch_grad_y(self, x, y, idx) -> np.ndarray:
        raise NotImplementedError

    def stoch_grad_x(self, x, y, S, rng):
        if S is None:
            return self.grad_x(x, y)
        return self.batch_grad_x(x, y, rng.integers(0, self.n, size=S))

    def stoch_grad_y(self, x, y, S, rng):
        if S is None:
            return self.grad_y(x, y)
        return self.batch_grad_y(x, y, rng.integers(0, self.n, size=S))


class SoftClustering(BlockObjective):
    """``f(X, y) = (1/n) sum_j [ sum_k y_jk ||xi_j - X_k||^2 + (rho/2) ||y_j||^2 ]``.

    ``X`` holds ``K`` centroids (flattened ``(K, p)``) constrained to a box;
    ``y`` holds one soft assignment per sample (flattened ``(n, K)``), each row
    on the probability simplex.
    """

    def __init__(self, shard: Shard, K: int, box_radius: float, rho: float = 0.1):
        if K < 1:
            raise ValueError("K must be at least 1")
        if box_radius <= 0:
            raise ValueError("box_radius must be positive")
        self.xi = shard.features
        self.n, self.p = self.xi.shape
        self.K = int(K)
        self.rho = float(rho)
        self.box_radius = float(box_radius)
        self.x_dim = self.K * self.p
        self.y_dim = self.n * self.K
        self.x_set = BoxSet.symmetric(box_radius)
        self.y_set = SimplexProductSet(self.K, self.n)

    @cached_property
    def smoothness_L(self) -> float:
        # ||[[Hxx, C], [C^T, Hyy]]|| <= max(||Hxx||, ||Hyy||) + ||C||_F on box x simplex
        reach = self.box_radius * np.sqrt(self.p) + float(np.linalg.norm(self.xi, axis=1).max())
        return max(2.0, self.rho / self.n) + 2.0 * reach * np.sqrt(self.K / self.n)

    def _dist(self, x, xi):
        C = x.reshape(self.K, self.p)
        return ((xi[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)

    def loss(self, x, y):
        Y = y.reshape(self.n, self.K)
        D = self._dist(x, self.xi)
        return float((Y * D).sum() / self.n + 0.5 * self.rho * (Y * Y).sum() / self.n)

    def _gx(self, x, Y, xi, scale):
        C = x.reshape(self.K, self.p)
        mass = Y.sum(axis=0)
        return (2.0 * scale * (mass[:, None] * C - Y.T @ xi)).reshape(-1)

    def grad_x(self, x, y):
        return self._gx(x, y.reshape(self.n, self.K), self.xi, 1.0 / self.n)

    def grad_y(self, x, y):
        Y = y.reshape(self.n, self.K)
        return ((self._dist(x, self.xi) + self.rho * Y) / self.n).reshape(-1)

    def batch_grad_x(self, x, y, idx):
        Y = y.reshape(self.n, self.K)[idx]
        return self._gx(x, Y, self.xi[idx], 1.0 / len(idx))

    def batch_grad_y(self, x, y, idx):
        Y = y.reshape(self.n, self.K)
        counts = np.bincount(idx, minlength=self.n).astype(np.float64)
        rows = np.nonzero(counts)[0]
        G = np.zeros((self.n, self.K))
        G[rows] = (self._dist(x, self.xi[rows]) + self.rho * Y[rows]) * (counts[rows] / len(idx))[:, None]
        return G.reshape(-1)

    def nearest_assignment(self, x) -> np.ndarray:
        """One-hot assignment of each sample to its nearest centroid."""
        D = self._dist(x, self.xi)
        return np.eye(self.K)[np.argmin(D, axis=1)].reshape(-1)


def make_soft_clustering(shard: Shard, K: int, box_radius: float, rho: float = 0.1) -> SoftClustering:
    return SoftClustering(shard, K, box_radius, rho)


class FixedBlock(Objective):
    """View of a :class:`BlockObjective` as a function of ``x`` alone with ``y`` frozen."""

    def __init__(self, block: BlockObjective, y: np.ndarray):
        self.block = block
        self.y = np.array(y, dtype=np.float64)
        self.n = block.n
        self.dim = block.x_dim

    @property
    def smoothness_L(self) -> float:
        return self.block.smoothness_L

    def loss(self, x):
        return self.block.loss(x, self.y)

    def full_grad(self, x):
        return self.block.grad_x(x, self.y)

    def batch_grad(self, x, idx):
        return self.block.batch_grad_x(x, self.y, idx)
