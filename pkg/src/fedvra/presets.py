"""Parameter rules that turn the engine into known federated methods, and direct reference implementations.

A preset fixes the penalty ``gamma``, the dual stepsize ``a`` and the
aggregation stepsize ``d`` (possibly per round and per client):

================  ==========  ==================  =====================================
name              gamma       a                   d
================  ==========  ==================  =====================================
fedavg            0           0                   N/m
fedprox           given > 0   0                   N/m
fednova           0           0                   Q_eff / (Q_i sum_{active} omega)
scaffold_approx   given       1 / (gamma eta Q)   1
feddyn_approx     given > 0   1                   N/m
fedadmm           given       1                   1
fedvra            given       given               given (default 1/p)
================  ==========  ==================  =====================================

The ``*_direct_round`` functions re-implement FedAvg, FedProx, FedNova,
federated ADMM and the control-variate (SCAFFOLD-form) method without using
the engine, so the presets can be checked against them.  They draw
mini-batches from the same per-client streams as the engine.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .objectives import BatchSampler, Objective, effective_batch
from .streams import client_stream

PRESET_NAMES = ("fedavg", "fedprox", "fednova", "scaffold_approx", "feddyn_approx", "fedadmm", "fedvra")


@dataclass
class PresetContext:
    """Inputs of a preset rule.

    ``Q_table`` is an ``(R, N)`` array of local step counts.  ``m`` is the
    number of sampled clients per round for uniform sampling; when it is
    ``None`` the ``N/m`` rules use ``1/p_i`` instead.  ``a`` and ``d`` are read
    only by the ``fedvra`` preset.
    """

    N: int
    omegas: np.ndarray
    Q_table: np.ndarray
    gamma: float = 0.0
    eta: float = 0.01
    m: Optional[int] = None
    a: Optional[float] = None
    d: Optional[float] = None


@dataclass
class Preset:
    """Resolved preset: per-client ``gammas`` and ``etas`` plus a round-plan rule.

    ``plan(r, active, probs)`` is called after the active set is sampled,
    which the ``fednova`` rule needs.
    """

    name: str
    gammas: np.ndarray
    etas: np.ndarray
    rule: Callable[[int, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]] = field(repr=False)
    Q_table: np.ndarray = field(repr=False)

    def plan(self, r: int, active: np.ndarray, probs: np.ndarray):
        from .fedcore import RoundPlan
        a, d = self.rule(r, active, probs)
        return RoundPlan(active=active, p=probs, Q=self.Q_table[r], a=a, d=d)

    __call__ = plan


def _unbias(ctx: PresetContext, probs: np.ndarray) -> np.ndarray:
    if ctx.m is not None:
        return np.full(ctx.N, ctx.N / ctx.m)
    return 1.0 / probs


def apply_preset(name: str, ctx: PresetContext) -> Preset:
    """Resolve preset ``name`` for the given context."""
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; expected one of {', '.join(PRESET_NAMES)}")
    N = ctx.N
    omegas = np.asarray(ctx.omegas, dtype=np.float64)
    Q_table = np.asarray(ctx.Q_table, dtype=np.int64)
    if Q_table.ndim != 2 or Q_table.shape[1] != N:
        raise ValueError("Q_table must have shape (R, N)")
    if ctx.m is not None and not 1 <= ctx.m <= N:
        raise ValueError(f"m out of range [1, {N}]")
    etas = np.full(N, float(ctx.eta))
    zeros = np.zeros(N)

    if name in ("fedavg", "fednova"):
        gammas = zeros.copy()
    else:
        if not ctx.gamma > 0:
            raise ValueError(f"preset {name} needs gamma > 0")
        gammas = np.full(N, float(ctx.gamma))

    if name == "fedavg":
        rule = lambda r, active, probs: (zeros, _unbias(ctx, probs))
    elif name == "fedprox":
        rule = lambda r, active, probs: (zeros, _unbias(ctx, probs))
    elif name == "fednova":
        def rule(r, active, probs):
            d = np.ones(N)
            if active.size:
                w = omegas[active]
                Q = Q_table[r, active].astype(np.float64)
                q_eff = float(np.dot(w, Q) / w.sum())
                d[active] = q_eff / (Q * w.sum())
            return zeros, d
    elif name == "scaffold_approx":
        if np.any(Q_table != Q_table[0, 0]):
            raise ValueError("scaffold_approx needs a constant Q")
        Q = int(Q_table[0, 0])
        if ctx.gamma * ctx.eta * Q >= 1:
            warnings.warn("scaffold_approx with gamma*eta*Q >= 1 gives a dual stepsize below 1; "
                          "the approximation needs small gamma", RuntimeWarning, stacklevel=2)
        a = np.full(N, 1.0 / (ctx.gamma * ctx.eta * Q))
        rule = lambda r, active, probs: (a, np.ones(N))
    elif name == "feddyn_approx":
        rule = lambda r, active, probs: (np.ones(N), _unbias(ctx, probs))
    elif name == "fedadmm":
        rule = lambda r, active, probs: (np.ones(N), np.ones(N))
    else:
        if ctx.a is None:
            raise ValueError("the fedvra preset needs a")
        a = np.full(N, float(ctx.a))
        if ctx.d is None:
            rule = lambda r, active, probs: (a, 1.0 / probs)
        else:
            dd = np.full(N, float(ctx.d))
            rule = lambda r, active, probs: (a, dd)
    return Preset(name, gammas, etas, rule, Q_table)


# ---------------------------------------------------------------------------
# direct reference implementations


def _local_sgd(obj: Objective, x0, eta, Q, S, rng, prox=0.0, correction=None, sampling="iid"):
    """Plain local SGD from ``x0``, optionally with a proximal pull and a constant correction."""
    sampler = BatchSampler(obj.n, effective_batch(S, obj.n), rng, sampling)
    x = np.array(x0, dtype=np.float64)
    sgs = []
    for _ in range(Q):
        idx = sampler.next()
        g = obj.full_grad(x) if idx is None else obj.batch_grad(x, idx)
        sgs.append(g)
        step = g
        if correction is not None:
            step = step + correction
        if prox:
            step = step + prox * (x - x0)
        x = x - eta * step
    return x, sgs


def fedavg_direct_round(x0, objectives: Sequence[Objective], omegas, active, eta: float, Q, S,
                        seed: int, round_index: int, scale: Optional[float] = None,
                        prox: float = 0.0, sampling: str = "iid") -> np.ndarray:
    """Local SGD on the active clients followed by ``x0 + scale sum omega_i (x_i - x0)``.

    ``scale`` defaults to ``N/m``.  ``prox > 0`` gives FedProx local steps.
    """
    N = len(objectives)
    active = [int(i) for i in active]
    if scale is None:
        scale = N / len(active) if active else 0.0
    Q = np.broadcast_to(np.asarray(Q), (N,))
    acc = np.zeros_like(np.asarray(x0, dtype=np.float64))
    for i in active:
        xi, _ = _local_sgd(objectives[i], x0, eta, int(Q[i]), S, client_stream(seed, round_index, i),
                           prox=prox, sampling=sampling)
        acc += omegas[i] * (xi - x0)
    return x0 + scale * acc


def fednova_direct_round(x0, objectives: Sequence[Objective], omegas, active, eta: float, Q, S,
                         seed: int, round_index: int, sampling: str = "iid") -> np.ndarray:
    """Normalized averaging: ``x0 - eta Q_eff sum_A (omega_i / W_A) (1/Q_i) sum_t g_i^t``."""
    active = [int(i) for i in active]
    if not active:
        return np.array(x0, dtype=np.float64)
    Q = np.broadcast_to(np.asarray(Q), (len(objectives),))
    w_active = sum(omegas[i] for i in active)
    q_eff = sum(omegas[i] * Q[i] for i in active) / w_active
    direction = np.zeros_like(np.asarray(x0, dtype=np.float64))
    for i in active:
        _, sgs = _local_sgd(objectives[i], x0, eta, int(Q[i]), S, client_stream(seed, round_index, i),
                            sampling=sampling)
        direction += (omegas[i] / w_active) * (np.sum(sgs, axis=0) / Q[i])
    return x0 - eta * q_eff * direction


@dataclass
class ADMMState:
    """Federated ADMM state kept as the server sees it: one message ``gamma_j x_j - lam_j`` per client."""

    x0: np.ndarray
    lams: List[np.ndarray]
    messages: List[np.ndarray]
    round: int = 0


def admm_init(x0, lams, gammas) -> ADMMState:
    x0 = np.array(x0, dtype=np.float64)
    lams = [np.array(l, dtype=np.float64) for l in lams]
    return ADMMState(x0, lams, [g * x0 - l for g, l in zip(gammas, lams)])


def admm_direct_round(state: ADMMState, objectives: Sequence[Objective], omegas, gammas, etas, active,
                      Q, S, seed: int, sampling: str = "iid") -> ADMMState:
    """One round of federated ADMM with the server step in closed form.

    The new global model minimizes the augmented Lagrangian in ``x0``:
    ``x0' = beta sum_j omega_j (gamma_j x_j - lam_j)`` over *all* clients, where
    an idle client holds ``x_j = x0`` and its previous dual.
    """
    N = len(objectives)
    r = state.round
    Q = np.broadcast_to(np.asarray(Q), (N,))
    beta = 1.0 / sum(omegas[j] * gammas[j] for j in range(N))
    lams = list(state.lams)
    messages = [gammas[j] * state.x0 - lams[j] for j in range(N)]
    for i in (int(i) for i in active):
        xi, _ = _local_sgd(objectives[i], state.x0, etas[i], int(Q[i]), S, client_stream(seed, r, i),
                           prox=gammas[i], correction=-lams[i], sampling=sampling)
        lams[i] = lams[i] + gammas[i] * (state.x0 - xi)
        messages[i] = gammas[i] * xi - lams[i]
    x0 = beta * sum(omegas[j] * messages[j] for j in range(N))
    return ADMMState(x0, lams, messages, r + 1)


@dataclass
class ScaffoldState:
    x0: np.ndarray
    controls: List[np.ndarray]
    round: int = 0

    def global_control(self, omegas) -> np.ndarray:
        return sum(w * c for w, c in zip(omegas, self.controls))


def scaffold_form_round(state: ScaffoldState, objectives: Sequence[Objective], omegas, active,
                        eta: float, Q: int, S, seed: int, sampling: str = "iid",
                        return_local: bool = False):
    """One round of the control-variate method.

    Local steps ``x <- x - eta (g_i(x) + c - c_i)`` with ``c = sum omega_j c_j``;
    afterwards ``c_i`` becomes the average of the stochastic gradients used and
    the server takes ``x0 + sum_A omega_i (x_i - x0)``.
    """
    r = state.round
    c = state.global_control(omegas)
    controls = list(state.controls)
    acc = np.zeros_like(state.x0)
    local = {}
    for i in (int(i) for i in active):
        xi, sgs = _local_sgd(objectives[i], state.x0, eta, Q, S, client_stream(seed, r, i),
                             correction=c - state.controls[i], sampling=sampling)
        controls[i] = np.mean(sgs, axis=0)
        acc += omegas[i] * (xi - state.x0)
        local[i] = xi
    new = ScaffoldState(state.x0 + acc, controls, r + 1)
    return (new, local) if return_local else new


def scaffold_approx_deviation(objectives: Sequence[Objective], omegas, x0, gamma: float, eta: float,
                              Q: int, rounds: int, seed: int, active_sets: Sequence[Sequence[int]],
                              S=None) -> Dict[str, np.ndarray]:
    """Per-round gap between the engine's ``scaffold_approx`` local work and the control-variate method.

    Follows the control-variate trajectory.  At each round the engine is
    started from the same global model with client duals ``c_i - c``
    (centered so their weighted sum vanishes), runs ``scaffold_approx``
    local steps and dual updates, and its local models are averaged with
    unit aggregation stepsize, ``x0 + sum_A omega_i (x_i - x0)``.  Returned
    are the per-round max-abs gaps of that averaged model (``"x0"``) and of
    the refreshed duals against the new controls ``c_i'`` (``"dual"``).
    """
    from .fedcore import ClientState, dual_update, local_round

    N = len(objectives)
    a = 1.0 / (gamma * eta * Q)
    state = ScaffoldState(np.array(x0, dtype=np.float64), [np.zeros_like(x0, dtype=np.float64) for _ in range(N)])
    x_gap, dual_gap = np.zeros(rounds), np.zeros(rounds)
    for r in range(rounds):
        active = [int(i) for i in active_sets[r]]
        c = state.global_control(omegas)
        acc = np.zeros_like(state.x0)
        lam_new = {}
        for i in active:
            client = ClientState(i, objectives[i], state.controls[i] - c, omegas[i], gamma, eta)
            xi, _ = local_round(client, state.x0, Q, S, client_stream(seed, r, i))
            acc += omegas[i] * (xi - state.x0)
            lam_new[i] = dual_update(client.lam, a, gamma, state.x0, xi)
        engine_x0 = state.x0 + acc
        state = scaffold_form_round(state, objectives, omegas, active, eta, Q, S, seed)
        x_gap[r] = np.max(np.abs(engine_x0 - state.x0))
        dual_gap[r] = max((np.max(np.abs(lam_new[i] - state.controls[i])) for i in active), default=0.0)
    return {"x0": x_gap, "dual": dual_gap}
