"""Two-block constrained variant: shared ``x`` in a box, private ``y_i`` in simplex products.

Each active client first takes ``Q_y`` projected stochastic gradient steps on
its private block at the broadcast model,

    y <- P_Y(y - eta_y g^y(x0, y)),

then ``Q_hat - Q_y`` dual-corrected steps on ``x`` with ``y`` frozen at the
new value.  The dual and server updates are those of :mod:`fedcore`, except
that the new global model is projected onto the box ``X`` (the aggregated
dual is not projected).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .analysis import Condition, FeasibilityReport, _eta_conditions, qtilde
from .fedcore import (ClientState, Contribution, DivergenceError, MetricsRow, RoundPlan, ServerState,
                      SamplingScheme, compute_beta, dual_update, local_round, sample_clients, server_update)
from .numerics import BoxSet, SimplexProductSet, norm_sq, project_box, project_simplex_product
from .objectives import BatchSampler, BlockObjective, FixedBlock, Shard, effective_batch
from .streams import client_stream, server_stream


@dataclass
class BlockClientState:
    client_id: int
    objective: BlockObjective
    y: np.ndarray
    lam: np.ndarray
    omega: float
    gamma: float
    eta: float
    eta_y: float
    q_y: int

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.q_y < 0:
            raise ValueError("q_y must be non-negative")
        if self.eta_y < 0 or self.eta < 0 or self.gamma <= 0 or self.omega <= 0:
            raise ValueError("need gamma, omega > 0 and non-negative stepsizes")

    @property
    def y_set(self) -> SimplexProductSet:
        return self.objective.y_set


def y_local_steps(client: BlockClientState, x0: np.ndarray, rng: np.random.Generator, S: Optional[int] = None,
                  steps: Optional[int] = None, sampling: str = "iid",
                  round_index: Optional[int] = None) -> np.ndarray:
    """``steps`` (default ``client.q_y``) projected SGD steps on ``y`` at fixed ``x0``."""
    obj = client.objective
    steps = client.q_y if steps is None else steps
    sampler = BatchSampler(obj.n, effective_batch(S, obj.n), rng, sampling)
    y = client.y.copy()
    for t in range(steps):
        idx = sampler.next()
        g = obj.grad_y(x0, y) if idx is None else obj.batch_grad_y(x0, y, idx)
        y = project_simplex_product(_finite(y - client.eta_y * g, round_index, client.client_id, t), client.y_set)
    return y


def _finite(v, round_index, client_id, step):
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"private block diverged (round {round_index}, client {client_id}, step {step})",
                              round_index, client_id, step)
    return v


def x_local_steps(client: BlockClientState, x0: np.ndarray, y_new: np.ndarray, steps: int,
                  rng: np.random.Generator, S: Optional[int] = None, trace: bool = False,
                  sampling: str = "iid", round_index: Optional[int] = None):
    """Dual-corrected local steps on ``x`` with the private block frozen at ``y_new``."""
    if steps == 0:
        return np.array(x0, dtype=np.float64), ([] if trace else None)
    view = ClientState(client.client_id, FixedBlock(client.objective, y_new), client.lam,
                       client.omega, client.gamma, client.eta)
    return local_round(view, x0, steps, S, rng, trace, sampling, round_index)


def server_update_proj(server: ServerState, contributions: Sequence[Contribution], d, omegas, gammas,
                       box: BoxSet) -> ServerState:
    new = server_update(server, contributions, d, omegas, gammas)
    return replace(new, x0=project_box(new.x0, box))


@dataclass
class RoundResultU:
    server: ServerState
    clients: List[BlockClientState]
    row: MetricsRow
    local_models: Dict[int, np.ndarray]


def run_round_u(server: ServerState, clients: Sequence[BlockClientState], plan: RoundPlan, S: Optional[int],
                seed: int, box: BoxSet, sampling: str = "iid", metrics: bool = True) -> RoundResultU:
    """One round; ``plan.Q`` holds the total step count ``Q_hat`` of each client."""
    r = server.round
    x0 = server.x0
    new_clients = list(clients)
    contributions, local_models = [], {}
    for i in (int(i) for i in plan.active):
        c = clients[i]
        q_hat = int(plan.Q[i])
        if c.q_y > q_hat:
            raise ValueError(f"client {i}: q_y exceeds the total local step count")
        rng = client_stream(seed, r, i)
        y_new = y_local_steps(c, x0, rng, S, sampling=sampling, round_index=r)
        x_new, _ = x_local_steps(c, x0, y_new, q_hat - c.q_y, rng, S, sampling=sampling, round_index=r)
        lam_new = dual_update(c.lam, float(plan.a[i]), c.gamma, x0, x_new)
        new_clients[i] = replace(c, y=y_new, lam=lam_new)
        contributions.append(Contribution(i, x_new - x0, c.gamma, float(plan.a[i])))
        local_models[i] = x_new
    omegas = [c.omega for c in clients]
    gammas = [c.gamma for c in clients]
    new_server = server_update_proj(server, contributions, plan.d, omegas, gammas, box)
    if metrics:
        loss, grad = block_objective_value(new_server.x0, new_clients)
        row = MetricsRow(round=r, grad_norm_sq=norm_sq(grad), train_loss=loss,
                         consensus_err=float(sum(clients[i].omega * norm_sq(x - new_server.x0)
                                                 for i, x in local_models.items())),
                         active_count=len(local_models))
        row.gap = optimality_gap(new_server, new_clients, box)
    else:
        row = MetricsRow(round=r, grad_norm_sq=math.nan, train_loss=math.nan, active_count=len(local_models))
    return RoundResultU(new_server, new_clients, row, local_models)


def block_objective_value(x0: np.ndarray, clients: Sequence[BlockClientState]) -> Tuple[float, np.ndarray]:
    """``(sum omega_i f_i(x0, y_i), sum omega_i grad_x f_i(x0, y_i))``."""
    loss = sum(c.omega * c.objective.loss(x0, c.y) for c in clients)
    grad = sum(c.omega * c.objective.grad_x(x0, c.y) for c in clients)
    return float(loss), grad


def optimality_gap(server: ServerState, clients: Sequence[BlockClientState], box: BoxSet) -> float:
    """Projected-gradient stationarity measure of ``(x0, y)``.

    ``(1/beta^2) ||x0 - P_X(x0 - beta grad_x f(x0, y+))||^2
    + sum_i (omega_i / eta_y_i^2) ||y_i - P_Y(y_i - eta_y_i grad_y f_i(x0, y_i))||^2``

    where ``y+`` is every client's private block after ``q_y`` full-gradient
    projected steps at ``x0`` (all clients take part).  Zero exactly at a
    stationary point.
    """
    x0 = server.x0
    beta = server.beta
    if beta is None:
        raise ValueError("the gap needs positive penalties")
    grad_x = np.zeros_like(x0)
    y_term = 0.0
    for c in clients:
        y_plus = y_local_steps(c, x0, np.random.default_rng(0), None)
        grad_x += c.omega * c.objective.grad_x(x0, y_plus)
        if c.eta_y > 0:
            y_step = project_simplex_product(c.y - c.eta_y * c.objective.grad_y(x0, c.y), c.y_set)
            y_term += c.omega / c.eta_y ** 2 * norm_sq(c.y - y_step)
    x_step = project_box(x0 - beta * grad_x, box)
    return norm_sq(x0 - x_step) / beta ** 2 + y_term


def feasibility_check_u(L: float, p: float, a: float, d: float, gamma: float, eta: float, Q_x: int,
                        Q_y: int, eta_y: float, beta: float) -> FeasibilityReport:
    """Sufficient conditions for the constrained variant.

    ``penalty``: ``(gamma - L/2) p a gamma eta Q~ sqrt(1 - p) >= 9 L``; undefined
    (reported, not raised) at ``p = 1``.  The ``eta_*`` branches are as in
    :func:`analysis.feasibility_check`.  ``eta_y``:
    ``1/eta_y >= L + 4 beta Q_y L^2 (1 + 400 / (a gamma eta Q~)^2)``.
    ``Q~`` is computed from the ``x``-step count ``Q_x``.
    """
    if L <= 0 or not 0 < p <= 1 or gamma <= 0 or eta <= 0 or a <= 0 or d <= 0 or Q_x < 1 or Q_y < 0:
        raise ValueError("need L, gamma, eta, a, d > 0, p in (0, 1], Q_x >= 1 and Q_y >= 0")
    qt, _ = qtilde(gamma, eta, Q_x, strict=False)
    c2 = a * gamma * eta * qt
    conds: Dict[str, Condition] = {}
    flags = []
    if p >= 1:
        conds["penalty"] = Condition("penalty", None, math.nan, "undefined at p = 1")
        flags.append("penalty condition undefined at p = 1")
    else:
        lhs = (gamma - L / 2.0) * p * c2 * math.sqrt(1.0 - p)
        conds["penalty"] = Condition("penalty", lhs >= 9.0 * L, lhs - 9.0 * L,
                                     "(gamma - L/2) p a gamma eta Q~ sqrt(1-p) >= 9 L")
    conds.update(_eta_conditions(L, a, d, gamma, eta, qt))
    need = L + 4.0 * beta * Q_y * L * L * (1.0 + 400.0 / c2 ** 2)
    inv = math.inf if eta_y == 0 else 1.0 / eta_y
    conds["eta_y"] = Condition("eta_y", inv >= need, inv - need,
                               "1/eta_y >= L + 4 beta Q_y L^2 (1 + 400/(a gamma eta Q~)^2)")
    return FeasibilityReport(conds, flags)


def eta_y_bound(L: float, a: float, gamma: float, eta: float, Q_x: int, Q_y: int, beta: float) -> float:
    """Largest ``eta_y`` allowed by the private-block stepsize condition."""
    qt, _ = qtilde(gamma, eta, Q_x, strict=False)
    c2 = a * gamma * eta * qt
    return 1.0 / (L + 4.0 * beta * Q_y * L * L * (1.0 + 400.0 / c2 ** 2))


def boundary_params_u(L: float, p: float, a: float, d: float, Q_x: int, Q_y: int,
                      gamma_margin: float = 1.02, step_fraction: float = 0.999,
                      eta_y_fraction: float = 0.9) -> Tuple[float, float, float]:
    """Feasible ``(gamma, eta, eta_y)`` near the edge of :func:`feasibility_check_u`.

    Same construction as :func:`analysis.boundary_params`: ``eta`` fixes
    ``(a + d) gamma eta Q~ = step_fraction``, ``gamma`` is ``gamma_margin``
    times the resulting penalty bound, and ``eta_y`` is ``eta_y_fraction`` of
    its upper limit at ``beta = 1/gamma`` (uniform penalties).
    """
    if not 0 < p < 1:
        raise ValueError("the penalty condition needs p in (0, 1)")
    if a <= 0 or d <= 0 or L <= 0 or Q_x < 1 or Q_y < 0 or a + d < 1:
        raise ValueError("need a, d, L > 0, a + d >= 1, Q_x >= 1 and Q_y >= 0")
    c2 = a / (a + d) * step_fraction
    gamma = gamma_margin * (0.5 * L + 9.0 * L / (p * c2 * math.sqrt(1.0 - p)))
    eta = -math.expm1(math.log1p(-step_fraction / (a + d)) / Q_x) / gamma
    beta = 1.0 / gamma
    eta_y = eta_y_fraction * eta_y_bound(L, a, gamma, eta, Q_x, Q_y, beta)
    report = feasibility_check_u(L, p, a, d, gamma, eta, Q_x, Q_y, eta_y, beta)
    if not report.passed:
        raise ValueError(f"boundary parameters violate {report.failing()}")
    return gamma, eta, eta_y


# ---------------------------------------------------------------------------
# soft-clustering testbed


def cluster_dataset(N: int, K: int, n_per_client: int, seed: int, radius: float = 0.8, spread: float = 0.05,
                    alpha: float = 1.0) -> Tuple[List[Shard], np.ndarray]:
    """2-d points around ``K`` centers evenly spaced on a circle.

    Each client draws its cluster proportions from ``Dirichlet(alpha)`` and
    its points i.i.d. from the resulting mixture.  Returns the shards and the
    ``(K, 2)`` centers.
    """
    rng = np.random.default_rng(seed)
    ang = 2 * np.pi * np.arange(K) / K
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    shards = []
    for _ in range(N):
        props = rng.dirichlet(np.full(K, alpha))
        lab = rng.choice(K, size=n_per_client, p=props)
        pts = centers[lab] + spread * rng.standard_normal((n_per_client, 2))
        shards.append(Shard(pts, lab))
    return shards, centers


def init_block_states(objectives: Sequence[BlockObjective], x0, y0: Sequence[np.ndarray], omegas, gammas, etas,
                      etas_y, q_y, box: BoxSet) -> Tuple[ServerState, List[BlockClientState]]:
    N = len(objectives)
    bc = lambda v: np.broadcast_to(np.asarray(v, dtype=np.float64), (N,))
    omegas, gammas, etas, etas_y = bc(omegas), bc(gammas), bc(etas), bc(etas_y)
    qy = np.broadcast_to(np.asarray(q_y, dtype=np.int64), (N,))
    x0 = project_box(np.array(x0, dtype=np.float64), box)
    clients = [BlockClientState(i, objectives[i], np.array(y0[i]), np.zeros_like(x0), float(omegas[i]),
                                float(gammas[i]), float(etas[i]), float(etas_y[i]), int(qy[i])) for i in range(N)]
    server = ServerState(x0=x0, lam=np.zeros_like(x0), beta=compute_beta(omegas, gammas))
    return server, clients


def run_experiment_u(server: ServerState, clients: Sequence[BlockClientState], plan_fn, scheme: SamplingScheme,
                     R: int, S: Optional[int], seed: int, box: BoxSet, sampling: str = "iid",
                     eval_stride: int = 1, on_row=None):
    """Iterate :func:`run_round_u`; returns ``(rows, server, clients)``."""
    N = len(clients)
    rows = []
    for r in range(R):
        active, probs = sample_clients(N, scheme, server_stream(seed, r, N))
        plan = plan_fn(r, active, probs)
        hit = (r + 1) % eval_stride == 0 or r == R - 1
        res = run_round_u(server, clients, plan, S, seed, box, sampling, metrics=hit)
        server, clients = res.server, res.clients
        rows.append(res.row)
        if on_row is not None:
            on_row(res.row)
    return rows, server, list(clients)
