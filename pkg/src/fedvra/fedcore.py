"""The federated primal-dual round engine.

One round broadcasts the server model ``x0``, lets every sampled client run
``Q_i`` dual-corrected local SGD steps on its augmented Lagrangian

    x <- x - eta_i (g_i(x) - lam_i + gamma_i (x - x0)),

moves the client dual ``lam_i <- lam_i + a_i gamma_i (x0 - x_i)`` and then
updates the server in two steps, the aggregated dual first:

    lam' = lam + sum_{active} omega_i a_i gamma_i (x0 - x_i)
    x0'  = x0 + beta sum_{active} omega_i d_i gamma_i (x_i - x0) - beta lam'

with ``beta = 1 / sum_i omega_i gamma_i``.  Federated ADMM is the special case
``a_i = d_i = 1``.  Clients that are not sampled keep their dual and are
treated as holding ``x_i = x0`` (never materialized).

When every ``gamma_i`` is zero the engine runs in the limit mode used by
plain model averaging: ``beta gamma_i`` is replaced by ``1 / sum_j omega_j``,
the dual stepsize must be zero and the server step is
``x0' = x0 + sum_{active} omega_i d_i (x_i - x0) / sum_j omega_j``.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import as_vector, norm_sq
from .objectives import BatchSampler, Objective, effective_batch
from .streams import client_stream, server_stream


class DivergenceError(FloatingPointError):
    """A local or global iterate became non-finite."""

    def __init__(self, message: str, round_index: Optional[int] = None,
                 client_id: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.round_index, self.client_id, self.step = round_index, client_id, step


@dataclass
class ClientState:
    client_id: int
    objective: Objective
    lam: np.ndarray
    omega: float
    gamma: float
    eta: float

    def __post_init__(self):
        self.lam = as_vector(self.lam)
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


@dataclass
class ServerState:
    x0: np.ndarray
    lam: np.ndarray
    beta: Optional[float]
    round: int = 0

    @property
    def limit_mode(self) -> bool:
        return self.beta is None


@dataclass
class RoundPlan:
    """Control inputs of one round; all per-client arrays have length ``N``."""

    active: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    a: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=np.int64)
        N = len(self.Q)
        self.p = _per_client(self.p, N, "p")
        self.Q = np.asarray(self.Q, dtype=np.int64)
        self.a = _per_client(self.a, N, "a")
        self.d = _per_client(self.d, N, "d")
        if np.unique(self.active).size != self.active.size:
            raise ValueError("active set has duplicates")
        if self.active.size and (self.active.min() < 0 or self.active.max() >= N):
            raise ValueError("active set refers to unknown clients")
        if np.any(self.Q[self.active] < 1):
            raise ValueError("active clients need Q >= 1")
        if np.any(self.a < 0):
            raise ValueError("a must be non-negative")
        if np.any((self.p <= 0) | (self.p > 1)):
            raise ValueError("p must lie in (0, 1]")

    @property
    def N(self) -> int:
        return len(self.Q)


def _per_client(v, N, name):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(N, float(arr))
    if arr.shape != (N,):
        raise ValueError(f"{name} must be a scalar or have one entry per client")
    return arr.copy()


@dataclass
class Contribution:
    """What an active client uploads: its model displacement and dual stepsize."""

    client_id: int
    delta: np.ndarray
    gamma: float
    a: float

    @property
    def scaled_delta(self) -> np.ndarray:
        return self.gamma * self.delta


@dataclass
class MetricsRow:
    """State after round ``round`` (that is, at ``x0^{round+1}``)."""

    round: int
    grad_norm_sq: float
    train_loss: float
    test_accuracy: float = math.nan
    consensus_err: float = math.nan
    active_count: int = 0
    xi_mean: float = math.nan
    potential: float = math.nan
    gap: float = math.nan


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplingScheme:
    """``kind="uniform_m"`` samples ``m`` distinct clients; ``"bernoulli"`` includes client ``i`` w.p. ``p[i]``."""

    kind: str = "uniform_m"
    m: Optional[int] = None
    p: Optional[Tuple[float, ...]] = None

    def probabilities(self, N: int) -> np.ndarray:
        if self.kind == "uniform_m":
            if self.m is None or not 1 <= self.m <= N:
                raise ValueError(f"m out of range [1, {N}]")
            return np.full(N, self.m / N)
        if self.kind == "bernoulli":
            p = np.asarray(self.p, dtype=np.float64)
            if p.shape != (N,):
                raise ValueError("bernoulli scheme needs one probability per client")
            if np.any((p <= 0) | (p > 1)):
                raise ValueError("p_i must lie in (0, 1]")
            return p
        raise ValueError(f"unknown sampling scheme {self.kind!r}")


def sample_clients(N: int, scheme: SamplingScheme, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw the active set; returns ``(sorted active ids, inclusion probabilities)``."""
    probs = scheme.probabilities(N)
    if scheme.kind == "uniform_m":
        active = np.sort(rng.choice(N, size=scheme.m, replace=False))
    else:
        active = np.flatnonzero(rng.random(N) < probs)
    return active.astype(np.int64), probs


# ---------------------------------------------------------------------------
# client side


def local_round(client: ClientState, x0: np.ndarray, Q: int, S: Optional[int],
                rng: np.random.Generator, trace: bool = False, sampling: str = "iid",
                round_index: Optional[int] = None) -> Tuple[np.ndarray, Optional[List[np.ndarray]]]:
    """Run ``Q`` dual-corrected local steps from ``x0``.

    Returns the final iterate and, when ``trace`` is set, the list of
    stochastic gradients used at each step.  ``client.lam`` is not modified.
    Shards smaller than ``S`` use batches of their full size.
    """
    if Q < 1:
        raise ValueError("Q must be at least 1")
    obj, eta, gamma, lam = client.objective, client.eta, client.gamma, client.lam
    sampler = BatchSampler(obj.n, effective_batch(S, obj.n), rng, sampling)
    x = np.array(x0, dtype=np.float64)
    sgs = [] if trace else None
    for t in range(Q):
        g = obj.grad(x, sampler.next())
        if trace:
            sgs.append(g)
        x = x - eta * (g - lam + gamma * (x - x0))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"local iterate diverged (round {round_index}, client {client.client_id}, step {t})",
                round_index, client.client_id, t)
    return x, sgs


def dual_update(lam_i: np.ndarray, a: float, gamma: float, x0: np.ndarray, x_new: np.ndarray) -> np.ndarray:
    if a < 0:
        raise ValueError("a must be non-negative")
    return lam_i + a * gamma * (x0 - x_new)


# ---------------------------------------------------------------------------
# server side


def compute_beta(omegas: Sequence[float], gammas: Sequence[float]) -> Optional[float]:
    """``1 / sum omega_i gamma_i``, or ``None`` when every ``gamma_i`` is zero (limit mode)."""
    g = np.asarray(gammas, dtype=np.float64)
    w = np.asarray(omegas, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("gamma must be non-negative")
    if np.all(g == 0):
        return None
    if np.any(g == 0):
        raise ValueError("gamma must be zero for every client or positive for every client")
    return 1.0 / float(np.dot(w, g))


def server_update(server: ServerState, contributions: Sequence[Contribution], d: Sequence[float],
                  omegas: Sequence[float], gammas: Sequence[float]) -> ServerState:
    """Aggregate uploads: dual first, then the model using the new dual."""
    omegas = np.asarray(omegas, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    N = omegas.size
    lam = server.lam.copy()
    step = np.zeros_like(server.x0)
    for c in contributions:
        if not 0 <= c.client_id < N:
            raise KeyError(f"contribution from unknown client {c.client_id}")
        w = omegas[c.client_id]
        if server.limit_mode:
            if c.a != 0:
                raise ValueError("the dual stepsize must be zero when every gamma is zero")
            step += w * d[c.client_id] * c.delta
        else:
            sd = c.scaled_delta
            lam -= w * c.a * sd
            step += w * d[c.client_id] * sd
    if server.limit_mode:
        x0 = server.x0 + step / omegas.sum()
    else:
        x0 = server.x0 + server.beta * step - server.beta * lam
    if not np.all(np.isfinite(x0)) or not np.all(np.isfinite(lam)):
        raise DivergenceError(f"server state diverged in round {server.round}", server.round)
    return ServerState(x0=x0, lam=lam, beta=server.beta, round=server.round + 1)


def aggregate_lambda(clients: Sequence[ClientState]) -> np.ndarray:
    return sum(c.omega * c.lam for c in clients)


def lambda_consistency(server: ServerState, clients: Sequence[ClientState]) -> float:
    """Max-abs gap between the server's running dual and ``sum omega_i lam_i``."""
    return float(np.max(np.abs(server.lam - aggregate_lambda(clients))))


def init_states(objectives: Sequence[Objective], x0, omegas, gammas, etas,
                lam_init: Optional[Sequence[np.ndarray]] = None) -> Tuple[ServerState, List[ClientState]]:
    """Build the initial server and client states; the server dual starts at ``sum omega_i lam_i``."""
    N = len(objectives)
    x0 = as_vector(x0, copy=True)
    omegas = _per_client(omegas, N, "omegas")
    gammas = _per_client(gammas, N, "gammas")
    etas = _per_client(etas, N, "etas")
    if lam_init is None:
        lam_init = [np.zeros_like(x0) for _ in range(N)]
    clients = [ClientState(i, objectives[i], np.array(lam_init[i], dtype=np.float64), omegas[i], gammas[i], etas[i])
               for i in range(N)]
    server = ServerState(x0=x0, lam=aggregate_lambda(clients), beta=compute_beta(omegas, gammas))
    return server, clients


# ---------------------------------------------------------------------------
# one round


@dataclass
class RoundResult:
    server: ServerState
    clients: List[ClientState]
    row: MetricsRow
    local_models: Dict[int, np.ndarray]
    traces: Dict[int, List[np.ndarray]] = field(default_factory=dict)


def _client_work(client, x0, Q, a, S, rng, trace, sampling, round_index):
    x_new, sgs = local_round(client, x0, Q, S, rng, trace, sampling, round_index)
    lam_new = dual_update(client.lam, a, client.gamma, x0, x_new)
    return x_new, lam_new, sgs


def global_objective(clients: Sequence[ClientState], x: np.ndarray) -> Tuple[float, np.ndarray]:
    """``(f(x), grad f(x))`` for ``f = sum omega_i f_i``."""
    loss = sum(c.omega * c.objective.loss(x) for c in clients)
    grad = sum(c.omega * c.objective.full_grad(x) for c in clients)
    return float(loss), grad


def run_round(server: ServerState, clients: Sequence[ClientState], plan: RoundPlan, S: Optional[int],
              seed: int, trace: bool = False, sampling: str = "iid", executor: Optional[Executor] = None,
              evaluate: Optional[Callable[[np.ndarray], float]] = None,
              metrics: bool = True) -> RoundResult:
    """Apply one full round; client randomness comes from ``client_stream(seed, round, i)``."""
    if plan.N != len(clients):
        raise ValueError("plan and client list differ in length")
    r = server.round
    x0 = server.x0
    jobs = [(clients[i], x0, int(plan.Q[i]), float(plan.a[i]), S, client_stream(seed, r, i),
             trace, sampling, r) for i in plan.active]
    if executor is None:
        outs = [_client_work(*job) for job in jobs]
    else:
        outs = list(executor.map(lambda job: _client_work(*job), jobs))

    new_clients = list(clients)
    contributions, local_models, traces = [], {}, {}
    for i, (x_new, lam_new, sgs) in zip(plan.active, outs):
        i = int(i)
        c = clients[i]
        contributions.append(Contribution(i, x_new - x0, c.gamma, float(plan.a[i])))
        new_clients[i] = replace(c, lam=lam_new)
        local_models[i] = x_new
        if trace:
            traces[i] = sgs
    omegas = [c.omega for c in clients]
    gammas = [c.gamma for c in clients]
    new_server = server_update(server, contributions, plan.d, omegas, gammas)

    if metrics:
        row = basic_metrics(new_server, new_clients, local_models, r, evaluate)
    else:
        row = MetricsRow(round=r, grad_norm_sq=math.nan, train_loss=math.nan,
                         active_count=len(local_models))
        if evaluate is not None:
            row.test_accuracy = float(evaluate(new_server.x0))
    return RoundResult(new_server, new_clients, row, local_models, traces)


def basic_metrics(server: ServerState, clients: Sequence[ClientState], local_models: Dict[int, np.ndarray],
                  round_index: int, evaluate: Optional[Callable[[np.ndarray], float]] = None) -> MetricsRow:
    loss, grad = global_objective(clients, server.x0)
    consensus = sum(clients[i].omega * norm_sq(x - server.x0) for i, x in local_models.items())
    return MetricsRow(
        round=round_index,
        grad_norm_sq=norm_sq(grad),
        train_loss=loss,
        test_accuracy=math.nan if evaluate is None else float(evaluate(server.x0)),
        consensus_err=float(consensus),
        active_count=len(local_models),
    )


# ---------------------------------------------------------------------------
# multi-round driver


PlanFn = Callable[[int, np.ndarray, np.ndarray], RoundPlan]


@dataclass
class Experiment:
    """A complete run specification.

    ``plan_fn(r, active, probs)`` turns the sampled set of round ``r`` into a
    :class:`RoundPlan`; presets build such functions.  ``evaluate`` (test
    accuracy) runs every round; loss, gradient norm and diagnostics only
    every ``eval_stride`` rounds and in the last one.
    """

    objectives: Sequence[Objective]
    x0: np.ndarray
    omegas: Sequence[float]
    gammas: Sequence[float] | float
    etas: Sequence[float] | float
    plan_fn: PlanFn
    scheme: SamplingScheme
    R: int
    S: Optional[int] = None
    seed: int = 0
    sampling: str = "iid"
    lam_init: Optional[Sequence[np.ndarray]] = None
    evaluate: Optional[Callable[[np.ndarray], float]] = None
    diagnostics: bool = False
    eval_stride: int = 1
    workers: int = 1
    on_row: Optional[Callable[[MetricsRow], None]] = None


@dataclass
class ExperimentResult:
    rows: List[MetricsRow]
    server: ServerState
    clients: List[ClientState]
    initial_server: ServerState
    initial_clients: List[ClientState]


def run_experiment(exp: Experiment) -> ExperimentResult:
    """Run ``exp.R`` rounds; the server samples from ``server_stream(seed, r, N)``."""
    server, clients = init_states(exp.objectives, exp.x0, exp.omegas, exp.gammas, exp.etas, exp.lam_init)
    init_server, init_clients = server, list(clients)
    N = len(clients)
    rows: List[MetricsRow] = []
    executor = None
    if exp.workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        executor = ThreadPoolExecutor(max_workers=exp.workers)
    try:
        for r in range(exp.R):
            active, probs = sample_clients(N, exp.scheme, server_stream(exp.seed, r, N))
            plan = exp.plan_fn(r, active, probs)
            stride_hit = (r + 1) % exp.eval_stride == 0 or r == exp.R - 1
            res = run_round(server, clients, plan, exp.S, exp.seed, sampling=exp.sampling,
                            executor=executor, evaluate=exp.evaluate, metrics=stride_hit)
            row = res.row
            if exp.diagnostics and stride_hit:
                from .analysis import diagnostics
                diag = diagnostics(res.server, res.clients, plan)
                row.xi_mean, row.potential = diag.xi_mean, diag.P
            server, clients = res.server, res.clients
            rows.append(row)
            if exp.on_row is not None:
                exp.on_row(row)
    finally:
        if executor is not None:
            executor.shutdown()
    return ExperimentResult(rows, server, clients, init_server, init_clients)
