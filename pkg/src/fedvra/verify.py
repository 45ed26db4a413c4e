"""Oracle suites behind ``fedvra verify``.

Every suite runs with fixed seeds and returns a JSON-serializable report
``{"suite", "passed", "tolerance", "max_deviation", "trials", "details"}``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Dict, List

import numpy as np

from .analysis import (expected_aggregate_bruteforce, feasibility_check, lemma1_check, qtilde, qtilde_closed,
                       record_trace, suggest_params)
from .fedcore import ClientState, SamplingScheme, init_states, run_round, sample_clients
from .objectives import Logistic, Quadratic, Shard, make_quadratic
from .presets import (PresetContext, admm_direct_round, admm_init, apply_preset, fedavg_direct_round,
                      fednova_direct_round)
from .streams import server_stream

SUITES = ("lemma1", "qtilde", "aggregation", "feasibility", "presets", "unbiasedness")


def random_quadratic(rng: np.random.Generator, dim: int, n: int = None) -> Quadratic:
    """``0.5 (x-c)^T A (x-c)`` with ``A = F^T F / n`` for a random ``n x dim`` factor ``F``."""
    n = n or dim
    F = rng.standard_normal((n, dim))
    A = F.T @ F / n + 0.1 * np.eye(dim)
    return make_quadratic(A, rng.standard_normal(dim))


def _report(suite: str, devs: List[float], tol: float, details: Dict = None) -> Dict:
    worst = float(max(devs)) if devs else 0.0
    return {"suite": suite, "passed": bool(devs) and worst <= tol, "tolerance": tol,
            "max_deviation": worst, "trials": len(devs), "details": details or {}}


def suite_lemma1(trials: int = 100, seed: int = 0) -> Dict:
    """Both closed forms of one local round against its replay, on random configurations."""
    rng = np.random.default_rng(seed)
    devs = []
    for t in range(trials):
        dim = int(rng.integers(1, 21))
        Q = int(rng.integers(1, 11))
        obj = random_quadratic(rng, dim, n=dim + 4)
        eta = float(rng.uniform(0.05, 0.9)) / obj.smoothness_L
        gamma = float(rng.uniform(0.01, 0.99)) / eta
        client = ClientState(0, obj, rng.standard_normal(dim), 1.0, gamma, eta)
        a = float(rng.uniform(0.0, 10.0))
        S = int(rng.integers(1, obj.n + 1))
        trace = record_trace(client, rng.standard_normal(dim), Q, a, S, np.random.default_rng([seed, t]))
        devs.append(lemma1_check(trace, a))
    return _report("lemma1", devs, 1e-10)


def suite_qtilde() -> Dict:
    """Geometric-sum identity on a 20 x 10 grid of ``(gamma eta, Q)``, plus the ``gamma eta = 0`` limit."""
    devs = []
    for ge in np.linspace(0.0, 1.0, 22)[1:-1]:
        for Q in range(1, 11):
            qt, _ = qtilde(ge, 1.0, Q)
            devs.append(abs(qt - qtilde_closed(ge, 1.0, Q)))
    zero = [qtilde(0.0, 1.0, Q)[0] == Q and qtilde_closed(0.0, 1.0, Q) == Q for Q in range(1, 11)]
    rep = _report("qtilde", devs, 1e-12, {"zero_limit_exact": all(zero)})
    rep["passed"] = rep["passed"] and all(zero)
    return rep


def suite_aggregation(seed: int = 0) -> Dict:
    """Enumerate every active set for ``N = 4``, ``m = 2`` and compare with the closed forms."""
    rng = np.random.default_rng(seed)
    N, dim = 4, 3
    devs, details = [], {}
    for mode in ("one", "N_over_m"):
        for a in (0.0, 0.7):
            objs = [random_quadratic(rng, dim) for _ in range(N)]
            omegas = rng.dirichlet(np.ones(N))
            gammas = rng.uniform(0.5, 2.0, N)
            lam = [rng.standard_normal(dim) for _ in range(N)]
            server, clients = init_states(objs, rng.standard_normal(dim), omegas, gammas, 0.05, lam)
            chk = expected_aggregate_bruteforce(server, clients, 2, mode, Q=3, a=a)
            devs.append(chk.deviation)
            details[f"{mode}/a={a}"] = chk.deviation
    return _report("aggregation", devs, 1e-12, details)


def suite_feasibility(inputs: int = 50, seed: int = 0) -> Dict:
    """Suggested parameters pass; single-condition perturbations fail on the right branch."""
    rng = np.random.default_rng(seed)
    fails, flagged = [], {"eta_penalty": 0, "penalty": 0}
    for _ in range(inputs):
        L = float(rng.uniform(0.1, 10.0))
        p = float(rng.uniform(0.05, 1.0))
        a = float(rng.uniform(0.5, 10.0))
        d = float(rng.uniform(0.5, 10.0))
        Q = int(rng.integers(1, 20))
        gamma, eta = suggest_params(L, p, a, d, Q)
        if not feasibility_check(L, p, a, d, gamma, eta, Q).passed:
            fails.append("suggested")
        bad = feasibility_check(L, p, a, d, gamma, 2.0 / gamma, Q)
        if "eta_penalty" in bad.failing():
            flagged["eta_penalty"] += 1
        else:
            fails.append("eta_penalty not flagged")
        bad = feasibility_check(L, p, a, d, L, eta, Q)
        if "penalty" in bad.failing():
            flagged["penalty"] += 1
        else:
            fails.append("penalty not flagged")
    return {"suite": "feasibility", "passed": not fails, "tolerance": 0.0, "max_deviation": float(len(fails)),
            "trials": inputs, "details": {"flagged": flagged, "failures": fails[:10]}}


def suite_presets(rounds: int = 50, seed: int = 0) -> Dict:
    """Engine presets against independent direct implementations with shared randomness."""
    rng = np.random.default_rng(seed)
    N, dim, m, S = 5, 4, 2, 3
    objs = [random_quadratic(rng, dim, n=8) for _ in range(N)]
    omegas = rng.dirichlet(np.ones(N))
    x_init = rng.standard_normal(dim)
    Q_table = rng.integers(1, 6, size=(rounds, N))
    scheme = SamplingScheme("uniform_m", m=m)
    eta = 0.05
    details = {}

    for name, direct in (("fedavg", fedavg_direct_round), ("fednova", fednova_direct_round)):
        pre = apply_preset(name, PresetContext(N, omegas, Q_table, 0.0, eta, m=m))
        server, clients = init_states(objs, x_init, omegas, pre.gammas, pre.etas)
        x_direct, worst = x_init.copy(), 0.0
        for r in range(rounds):
            active, probs = sample_clients(N, scheme, server_stream(seed, r, N))
            res = run_round(server, clients, pre.plan(r, active, probs), S, seed, metrics=False)
            server, clients = res.server, res.clients
            x_direct = direct(x_direct, objs, omegas, active, eta, Q_table[r], S, seed, r)
            worst = max(worst, float(np.max(np.abs(server.x0 - x_direct))))
        details[name] = worst

    gammas = rng.uniform(0.5, 2.0, N)
    etas = np.full(N, eta)
    pre = apply_preset("fedadmm", PresetContext(N, omegas, Q_table, 1.0, eta))
    lam0 = [rng.standard_normal(dim) for _ in range(N)]
    server, clients = init_states(objs, x_init, omegas, gammas, etas, lam0)
    state = admm_init(x_init, lam0, gammas)
    worst = 0.0
    for r in range(rounds):
        active, probs = sample_clients(N, scheme, server_stream(seed, r, N))
        res = run_round(server, clients, pre.plan(r, active, probs), S, seed, metrics=False)
        server, clients = res.server, res.clients
        state = admm_direct_round(state, objs, omegas, gammas, etas, active, Q_table[r], S, seed)
        worst = max(worst, float(np.max(np.abs(server.x0 - state.x0))))
    details["fedadmm"] = worst
    return _report("presets", list(details.values()), 1e-12, details)


def _enumerated_mean(obj, x, S: int) -> np.ndarray:
    tuples = itertools.product(range(obj.n), repeat=S)
    grads = [obj.batch_grad(x, np.array(t)) for t in tuples]
    return np.mean(grads, axis=0)


def suite_unbiasedness(seed: int = 0) -> Dict:
    """Mean over every equally likely with-replacement batch (``n = 6``, ``S = 2``) equals the full gradient."""
    rng = np.random.default_rng(seed)
    quad = random_quadratic(rng, 3, n=6)
    shard = Shard(rng.standard_normal((6, 3)), np.array([0, 1, 2, 0, 1, 2]))
    objs = {"quadratic": quad, "logistic": Logistic(shard, 0.1, 3)}
    details = {}
    for name, obj in objs.items():
        x = rng.standard_normal(obj.dim)
        details[name] = float(np.max(np.abs(_enumerated_mean(obj, x, 2) - obj.full_grad(x))))
    return _report("unbiasedness", list(details.values()), 1e-12, details)


_RUNNERS: Dict[str, Callable[[], Dict]] = {
    "lemma1": suite_lemma1, "qtilde": suite_qtilde, "aggregation": suite_aggregation,
    "feasibility": suite_feasibility, "presets": suite_presets, "unbiasedness": suite_unbiasedness,
}


def run_suite(name: str) -> Dict:
    if name not in _RUNNERS:
        raise ValueError(f"unknown suite {name!r}; expected one of {', '.join(SUITES)}")
    return _RUNNERS[name]()
