import itertools

import numpy as np
import pytest

from fedvra.numerics import project_simplex_product
from fedvra.objectives import (BatchSampler, FixedBlock, Shard, effective_batch, make_logistic, make_mlp,
                               make_quadratic, make_soft_clustering, stoch_grad)


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = eps
        g[k] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def quad(rng):
    F = rng.standard_normal((6, 3))
    return make_quadratic(F.T @ F / 6, rng.standard_normal(3))


@pytest.fixture
def logistic(rng):
    X = rng.standard_normal((6, 3))
    return make_logistic(Shard(X, np.array([0, 1, 2, 0, 1, 2])), 0.1, 3)


def test_shard_validation():
    with pytest.raises(ValueError):
        Shard(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        Shard(np.zeros((3, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        Shard(np.zeros((2, 2)), np.array([0, -1]))


def test_quadratic_hand_values():
    q = make_quadratic(np.eye(2), np.zeros(2))
    x = np.array([1.0, 2.0])
    np.testing.assert_allclose(q.full_grad(x), [1, 2])
    assert q.loss(x) == pytest.approx(2.5)
    assert q.loss(q.c) == 0.0
    np.testing.assert_array_equal(q.full_grad(q.c), 0.0)


def test_quadratic_rejects_bad_matrices():
    with pytest.raises(ValueError):
        make_quadratic(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        make_quadratic(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        make_quadratic(-np.eye(2), np.zeros(2))


def test_quadratic_smoothness_is_top_eigenvalue(quad):
    assert quad.smoothness_L == pytest.approx(np.linalg.eigvalsh(quad.A)[-1])


def test_quadratic_gradient_descent_reaches_minimizer(quad):
    x = np.zeros(3)
    for _ in range(200):
        x = x - quad.full_grad(x) / quad.smoothness_L
    if np.linalg.eigvalsh(quad.A)[0] > 1e-3:
        assert np.linalg.norm(quad.full_grad(x)) <= 1e-10


def test_quadratic_identity_minimizer_exact():
    q = make_quadratic(np.diag([1.0, 2.0, 3.0]), np.array([1.0, -1.0, 0.5]))
    x = np.zeros(3)
    for _ in range(200):
        x = x - q.full_grad(x) / q.smoothness_L
    assert np.linalg.norm(q.full_grad(x)) <= 1e-10


def test_finite_differences(quad, logistic, rng):
    for obj in (quad, logistic):
        x = rng.standard_normal(obj.dim)
        assert rel_err(obj.full_grad(x), central_diff(obj.loss, x)) <= 1e-6


def test_logistic_zero_weights_binary():
    X = np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, -0.7], [2.0, 1.0]])
    y = np.array([0, 1, 0, 1])
    obj = make_logistic(Shard(X, y), 0.0)
    assert obj.loss(np.zeros(obj.dim)) == pytest.approx(np.log(2))


def test_logistic_gradient_at_zero_by_hand():
    X = np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, -0.7]])
    y = np.array([1, 0, 1])
    obj = make_logistic(Shard(X, y), 0.0, fit_intercept=False)
    expected = -np.mean((y - 0.5)[:, None] * X, axis=0)
    np.testing.assert_allclose(obj.full_grad(np.zeros(2)), expected, atol=1e-15)


def test_logistic_needs_labels():
    with pytest.raises(ValueError):
        make_logistic(Shard(np.zeros((2, 2))))


def test_logistic_smoothness_formula(logistic):
    assert logistic.smoothness_L == pytest.approx(np.linalg.norm(logistic.X, 2) ** 2 / 24 + 0.1)


def test_lipschitz_on_random_pairs(quad, logistic, rng):
    for obj in (quad, logistic):
        for _ in range(1000):
            u, v = 3 * rng.standard_normal(obj.dim), 3 * rng.standard_normal(obj.dim)
            ratio = np.linalg.norm(obj.full_grad(u) - obj.full_grad(v)) / np.linalg.norm(u - v)
            assert ratio <= obj.smoothness_L * (1 + 1e-12)


def enumerate_mean(obj, x, S):
    return np.mean([obj.batch_grad(x, np.array(t)) for t in itertools.product(range(obj.n), repeat=S)], axis=0)


@pytest.mark.parametrize("S", [1, 2, 3])
def test_unbiased_by_enumeration(quad, logistic, rng, S):
    for obj in (quad, logistic):
        x = rng.standard_normal(obj.dim)
        np.testing.assert_allclose(enumerate_mean(obj, x, S), obj.full_grad(x), atol=1e-12)


def test_exhaustive_full_batch_is_exact(quad, rng):
    x = rng.standard_normal(3)
    np.testing.assert_array_equal(stoch_grad(quad, x, quad.n, rng, exhaustive=True), quad.full_grad(x))
    np.testing.assert_array_equal(stoch_grad(quad, x, None, rng), quad.full_grad(x))


def test_stoch_grad_range_errors(quad, rng):
    with pytest.raises(ValueError):
        stoch_grad(quad, np.zeros(3), 0, rng)
    with pytest.raises(ValueError):
        stoch_grad(quad, np.zeros(3), quad.n + 1, rng)


def test_quadratic_stochastic_variance(quad, rng):
    x = rng.standard_normal(3)
    S = 2
    draws = np.array([stoch_grad(quad, x, S, rng) for _ in range(100_000)])
    empirical = np.mean(np.sum((draws - quad.full_grad(x)) ** 2, axis=1))
    assert empirical == pytest.approx(quad.sample_variance(x) / S, rel=0.05)


def test_effective_batch_and_sampler():
    assert effective_batch(None, 5) is None
    assert effective_batch(50, 7) == 7
    assert effective_batch(3, 7) == 3
    rng = np.random.default_rng(0)
    s = BatchSampler(10, 3, rng, mode="epoch")
    seen = np.concatenate([s.next() for _ in range(3)])
    assert np.unique(seen).size == 9
    with pytest.raises(ValueError):
        BatchSampler(4, 5, rng)


@pytest.fixture
def small_mlp(rng):
    X = rng.standard_normal((10, 4))
    return make_mlp(Shard(X, np.arange(10) % 3), hidden_width=5, num_classes=3, l2_mu=1e-3)


def test_mlp_zero_weights_uniform(small_mlp):
    x = np.zeros(small_mlp.dim)
    assert small_mlp.loss(x) == pytest.approx(np.log(3) + 0.0)


def test_mlp_finite_differences_per_block(small_mlp, rng):
    x = small_mlp.initial_point(rng)
    g = small_mlp.full_grad(x)
    fd = central_diff(small_mlp.loss, x, eps=1e-6)
    for blk_g, blk_fd in zip(small_mlp.unpack(g), small_mlp.unpack(fd)):
        assert rel_err(blk_g.ravel(), blk_fd.ravel()) <= 1e-4


def test_mlp_descent_step(small_mlp, rng):
    x = small_mlp.initial_point(rng)
    x_new = x - 0.5 / small_mlp.smoothness_L * small_mlp.full_grad(x)
    assert small_mlp.loss(x_new) < small_mlp.loss(x)


def test_mlp_estimated_smoothness_covers_probe_region(small_mlp):
    rng = np.random.default_rng(123)
    center = small_mlp.initial_point(rng)
    radius = np.linalg.norm(center)
    for _ in range(200):
        u = center + radius * rng.standard_normal(center.size) / np.sqrt(center.size)
        v = u + 1e-2 * radius * rng.standard_normal(center.size) / np.sqrt(center.size)
        ratio = np.linalg.norm(small_mlp.full_grad(u) - small_mlp.full_grad(v)) / np.linalg.norm(u - v)
        assert ratio <= small_mlp.smoothness_L


def test_mlp_class_mismatch():
    with pytest.raises(ValueError):
        make_mlp(Shard(np.zeros((2, 2)), np.array([0, 5])), 3, num_classes=3)


@pytest.fixture
def clustering(rng):
    X = np.concatenate([rng.normal(-1, 0.1, (4, 2)), rng.normal(1, 0.1, (4, 2))])
    return make_soft_clustering(Shard(X), K=2, box_radius=2.0)


def test_soft_clustering_finite_differences(clustering, rng):
    x = rng.uniform(-1, 1, clustering.x_dim)
    y = project_simplex_product(rng.random(clustering.y_dim), clustering.y_set)
    assert rel_err(clustering.grad_x(x, y), central_diff(lambda v: clustering.loss(v, y), x)) <= 1e-6
    assert rel_err(clustering.grad_y(x, y), central_diff(lambda v: clustering.loss(x, v), y)) <= 1e-6


def test_soft_clustering_grad_y_equal_at_mean_centroids():
    X = np.array([[0.0, 1.0], [2.0, -1.0]])
    obj = make_soft_clustering(Shard(X), K=2, box_radius=3.0)
    x = np.tile(X.mean(axis=0), 2)
    y = np.full(4, 0.5)
    G = obj.grad_y(x, y).reshape(2, 2)
    np.testing.assert_allclose(G[:, 0], G[:, 1], atol=1e-15)


def test_soft_clustering_kmeans_stationarity(rng):
    X = np.concatenate([rng.normal(-1, 0.1, (5, 2)), rng.normal(1, 0.1, (5, 2))])
    obj = make_soft_clustering(Shard(X), K=2, box_radius=2.0, rho=0.0)
    x = np.concatenate([X[:5].mean(axis=0), X[5:].mean(axis=0)])
    y = obj.nearest_assignment(x)
    np.testing.assert_allclose(obj.grad_x(x, y), 0.0, atol=1e-14)


def test_soft_clustering_rejects_k0():
    with pytest.raises(ValueError):
        make_soft_clustering(Shard(np.zeros((2, 2))), K=0, box_radius=1.0)


def test_soft_clustering_unbiased_blocks(clustering, rng):
    x = rng.uniform(-1, 1, clustering.x_dim)
    y = project_simplex_product(rng.random(clustering.y_dim), clustering.y_set)
    pairs = list(itertools.product(range(clustering.n), repeat=2))
    gx = np.mean([clustering.batch_grad_x(x, y, np.array(t)) for t in pairs], axis=0)
    gy = np.mean([clustering.batch_grad_y(x, y, np.array(t)) for t in pairs], axis=0)
    np.testing.assert_allclose(gx, clustering.grad_x(x, y), atol=1e-12)
    np.testing.assert_allclose(gy, clustering.grad_y(x, y), atol=1e-12)


def test_soft_clustering_lipschitz_on_feasible_pairs(clustering, rng):
    L = clustering.smoothness_L
    for _ in range(1000):
        xs = [rng.uniform(-2, 2, clustering.x_dim) for _ in range(2)]
        ys = [project_simplex_product(rng.normal(size=clustering.y_dim), clustering.y_set) for _ in range(2)]
        g = [np.concatenate([clustering.grad_x(x, y), clustering.grad_y(x, y)]) for x, y in zip(xs, ys)]
        dist = np.linalg.norm(np.concatenate([xs[0] - xs[1], ys[0] - ys[1]]))
        assert np.linalg.norm(g[0] - g[1]) <= L * dist * (1 + 1e-12)


def test_fixed_block_view(clustering, rng):
    y = project_simplex_product(rng.random(clustering.y_dim), clustering.y_set)
    view = FixedBlock(clustering, y)
    x = rng.uniform(-1, 1, clustering.x_dim)
    np.testing.assert_array_equal(view.full_grad(x), clustering.grad_x(x, y))
    assert view.loss(x) == clustering.loss(x, y)
