"""Numerical checks of the algorithm's closed-form identities and parameter conditions.

Contents
--------
* ``qtilde``: geometric weights ``b_t = (1 - gamma eta)^(Q-1-t)`` of the local
  recursion and their sum ``Q~``.
* ``lemma1_check``: replays recorded stochastic gradients through the closed
  forms of the local displacement and of the refreshed dual.
* ``feasibility_check`` / ``suggest_params``: the sufficient conditions on
  ``(gamma, eta, a, d)`` for convergence and a constructive choice meeting them.
* ``diagnostics``: dual residuals ``Xi_i``, the potential ``P`` and the step
  products ``C1, C2``.
* ``expected_aggregate_bruteforce``: averages the server update over every
  sampled set of size ``m``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fedcore import (ClientState, Contribution, RoundPlan, ServerState, dual_update, global_objective,
                      local_round, server_update)
from .numerics import norm_sq


def qtilde(gamma: float, eta: float, Q: int, strict: bool = True) -> Tuple[float, np.ndarray]:
    """Return ``(Q~, b)`` with ``b_t = (1 - gamma eta)^(Q-1-t)`` and ``Q~ = sum_t b_t``.

    ``strict`` rejects ``gamma eta > 1`` (the weights would alternate in sign).
    """
    if Q < 1:
        raise ValueError("Q must be at least 1")
    ge = gamma * eta
    if ge < 0:
        raise ValueError("gamma * eta must be non-negative")
    if strict and ge > 1:
        raise ValueError(f"gamma * eta = {ge} exceeds 1")
    b = (1.0 - ge) ** np.arange(Q - 1, -1, -1, dtype=np.float64)
    return float(b.sum()), b


def qtilde_closed(gamma: float, eta: float, Q: int) -> float:
    """``(1 - (1 - gamma eta)^Q) / (gamma eta)``, or ``Q`` when ``gamma eta = 0``."""
    ge = gamma * eta
    if ge == 0:
        return float(Q)
    return -math.expm1(Q * math.log1p(-ge)) / ge if ge < 1 else (1.0 - (1.0 - ge) ** Q) / ge


# ---------------------------------------------------------------------------
# local recursion identities


@dataclass
class LemmaTrace:
    """One client's local round with the stochastic gradients it drew."""

    sgs: List[np.ndarray]
    gamma: float
    eta: float
    x0: np.ndarray
    lam: np.ndarray
    x_new: np.ndarray
    lam_new: Optional[np.ndarray] = None

    @property
    def Q(self) -> int:
        return len(self.sgs)

    def weights(self) -> Tuple[float, np.ndarray]:
        return qtilde(self.gamma, self.eta, self.Q)

    def normalized_sg(self) -> np.ndarray:
        """``G = sum_t (b_t / Q~) g_t``."""
        qt, b = self.weights()
        return np.tensordot(b / qt, np.asarray(self.sgs), axes=1)


def record_trace(client: ClientState, x0: np.ndarray, Q: int, a: float, S, rng) -> LemmaTrace:
    """Run one traced local round plus dual update and package it."""
    x_new, sgs = local_round(client, x0, Q, S, rng, trace=True)
    lam_new = dual_update(client.lam, a, client.gamma, x0, x_new)
    return LemmaTrace(sgs, client.gamma, client.eta, np.array(x0), client.lam.copy(), x_new, lam_new)


def lemma1_check(trace: LemmaTrace, a: float) -> float:
    """Max-abs deviation of both closed forms from the iterated values.

    Displacement: ``x_new - x0 = -eta Q~ sum_t (b_t / Q~)(g_t - lam)``.
    Dual: ``lam_new = a gamma eta Q~ G + (1 - a gamma eta Q~) lam``.
    """
    if not trace.sgs:
        raise ValueError("trace holds no stochastic gradients")
    if trace.lam_new is None:
        raise ValueError("trace lacks the updated dual")
    qt, b = trace.weights()
    w = b / qt
    G = np.tensordot(w, np.asarray(trace.sgs), axes=1)
    x_closed = trace.x0 - trace.eta * qt * (G - trace.lam)
    c2 = a * trace.gamma * trace.eta * qt
    lam_closed = c2 * G + (1.0 - c2) * trace.lam
    return max(float(np.max(np.abs(x_closed - trace.x_new))),
               float(np.max(np.abs(lam_closed - trace.lam_new))))


# ---------------------------------------------------------------------------
# convergence conditions


@dataclass
class Condition:
    name: str
    passed: Optional[bool]
    slack: float
    detail: str = ""

    def __post_init__(self):
        if self.passed is not None:
            self.passed = bool(self.passed)
        self.slack = float(self.slack)


@dataclass
class FeasibilityReport:
    conditions: Dict[str, Condition]
    flags: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed is True for c in self.conditions.values())

    def failing(self) -> List[str]:
        return [k for k, c in self.conditions.items() if c.passed is False]

    def as_dict(self) -> dict:
        return {"passed": self.passed, "flags": list(self.flags),
                "conditions": {k: {"passed": c.passed, "slack": c.slack, "detail": c.detail}
                               for k, c in self.conditions.items()}}


def _eta_conditions(L, a, d, gamma, eta, qt) -> Dict[str, Condition]:
    if qt <= 0:
        # only reachable with gamma eta > 1; the Q~-based bounds are then meaningless
        return {
            "eta_smoothness": Condition("eta_smoothness", False, -math.inf, "Q~ <= 0"),
            "eta_penalty": Condition("eta_penalty", eta <= 1.0 / gamma, 1.0 / gamma - eta, "eta <= 1/gamma"),
            "eta_steps": Condition("eta_steps", False, -math.inf, "Q~ <= 0"),
        }
    b1 = 1.0 / (math.sqrt(6.0) * qt * L)
    b2 = 1.0 / gamma if gamma > 0 else math.inf
    b3 = 1.0 / ((a + d) * gamma * qt) if (a + d) * gamma > 0 else math.inf
    return {
        "eta_smoothness": Condition("eta_smoothness", eta <= b1, b1 - eta, "eta <= 1/(sqrt(6) Q~ L)"),
        "eta_penalty": Condition("eta_penalty", eta <= b2, b2 - eta, "eta <= 1/gamma"),
        "eta_steps": Condition("eta_steps", eta <= b3, b3 - eta, "eta <= 1/((a+d) gamma Q~)"),
    }


def feasibility_check(L: float, p: float, a: float, d: float, gamma: float, eta: float, Q: int,
                      check_penalty: bool = True) -> FeasibilityReport:
    """Evaluate the sufficient convergence conditions at the given parameters.

    ``penalty``: ``(gamma - L/2) p a gamma eta Q~ >= 13 L / 2``, the product form
    of ``gamma >= L/2 + 13 L / (2 p a gamma eta Q~)``.  It is undefined for
    ``a = 0``; asking for it then raises, while ``check_penalty=False``
    reports it as undefined.
    The three ``eta_*`` branches bound the local stepsize.
    """
    if L <= 0 or not 0 < p <= 1 or gamma <= 0 or eta <= 0 or Q < 1 or a < 0 or d <= 0:
        raise ValueError("need L, gamma, eta, d > 0, a >= 0, p in (0, 1] and Q >= 1")
    qt, _ = qtilde(gamma, eta, Q, strict=False)
    conds: Dict[str, Condition] = {}
    flags = []
    if a == 0:
        if check_penalty:
            raise ValueError("the penalty condition is undefined for a = 0")
        conds["penalty"] = Condition("penalty", None, math.nan, "undefined for a = 0")
        flags.append("penalty condition undefined (a = 0)")
    else:
        lhs = (gamma - L / 2.0) * p * a * gamma * eta * qt
        conds["penalty"] = Condition("penalty", lhs >= 6.5 * L, lhs - 6.5 * L,
                                     "(gamma - L/2) p a gamma eta Q~ >= 13 L / 2")
    conds.update(_eta_conditions(L, a, d, gamma, eta, qt))
    if gamma * eta > 1:
        flags.append("gamma * eta > 1: local weights alternate in sign")
    return FeasibilityReport(conds, flags)


def suggest_params(L: float, p: float, a: float, d: float, Q: int) -> Tuple[float, float]:
    """``gamma = 28 (a+d) L / (p a)`` and ``eta = 1 / (2 (a+d) gamma Q)``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if Q < 1:
        raise ValueError("Q must be at least 1")
    if L <= 0 or d <= 0:
        raise ValueError("L and d must be positive")
    if 2.0 * (a + d) * Q < 1.0:
        raise ValueError("need 2 (a + d) Q >= 1 so that gamma eta <= 1")
    gamma = 28.0 * (a + d) * L / (p * a)
    eta = 1.0 / (2.0 * (a + d) * gamma * Q)
    return gamma, eta


def boundary_params(L: float, p: float, a: float, d: float, Q: int, gamma_margin: float = 1.02,
                    step_fraction: float = 0.999) -> Tuple[float, float]:
    """Feasible ``(gamma, eta)`` close to the edge of the conditions.

    ``eta`` makes ``(a + d) gamma eta Q~`` equal ``step_fraction``; with that
    product fixed the penalty condition reads
    ``gamma >= L/2 + 13 L (a + d) / (2 p a)`` (up to the fraction), and
    ``gamma`` is that bound times ``gamma_margin``.  Much larger steps than
    :func:`suggest_params` result.  The output is re-checked and a
    ``ValueError`` is raised when some other branch is violated.
    """
    if a <= 0 or d <= 0 or L <= 0 or not 0 < p <= 1 or Q < 1:
        raise ValueError("need a, d, L > 0, p in (0, 1] and Q >= 1")
    if (a + d) < 1:
        raise ValueError("need a + d >= 1")
    gamma = gamma_margin * (0.5 * L + 6.5 * L * (a + d) / (p * a * step_fraction))
    # 1 - (1 - gamma eta)^Q = gamma eta Q~ = step_fraction / (a + d)
    ge = -math.expm1(math.log1p(-step_fraction / (a + d)) / Q)
    eta = ge / gamma
    report = feasibility_check(L, p, a, d, gamma, eta, Q)
    if not report.passed:
        raise ValueError(f"boundary parameters violate {report.failing()}")
    return gamma, eta


# ---------------------------------------------------------------------------
# proof quantities


@dataclass
class DiagnosticsRow:
    """Per-round proof quantities.

    ``d_is_inverse_p`` flags the unbiased server scale ``d = 1/p``;
    ``c1_at_most_one`` flags ``(a + d) gamma eta Q~ <= 1`` for every client.
    """

    Xi: np.ndarray
    P: float
    C1: np.ndarray
    C2: np.ndarray
    f: float
    d_is_inverse_p: bool
    c1_at_most_one: bool

    @property
    def xi_mean(self) -> float:
        return float(np.mean(self.Xi))


def step_products(clients: Sequence[ClientState], plan: RoundPlan) -> Tuple[np.ndarray, np.ndarray]:
    """``C1_i = (a_i + d_i) gamma_i eta_i Q~_i`` and ``C2_i = a_i gamma_i eta_i Q~_i``."""
    ge_qt = np.array([c.gamma * c.eta * qtilde(c.gamma, c.eta, int(max(plan.Q[i], 1)), strict=False)[0]
                      for i, c in enumerate(clients)])
    return (plan.a + plan.d) * ge_qt, plan.a * ge_qt


def diagnostics(server: ServerState, clients: Sequence[ClientState], plan: RoundPlan) -> DiagnosticsRow:
    """Dual residuals ``Xi_i = ||grad f_i(x0) - lam_i||^2`` and the potential

    ``P = f(x0) + sum_i omega_i 4 beta Xi_i / (p_i C2_i)``.

    ``P`` is NaN in the zero-penalty limit mode or when some ``C2_i`` is zero.
    """
    x0 = server.x0
    Xi = np.array([norm_sq(c.objective.full_grad(x0) - c.lam) for c in clients])
    f, _ = global_objective(clients, x0)
    C1, C2 = step_products(clients, plan)
    omegas = np.array([c.omega for c in clients])
    if server.beta is None or np.any(C2 <= 0):
        P = math.nan
    else:
        P = f + float(np.sum(omegas * 4.0 * server.beta * Xi / (plan.p * C2)))
    return DiagnosticsRow(
        Xi=Xi, P=P, C1=C1, C2=C2, f=f,
        d_is_inverse_p=bool(np.allclose(plan.d, 1.0 / plan.p, rtol=1e-12, atol=0)),
        c1_at_most_one=bool(np.all(C1 <= 1.0 + 1e-12)),
    )


def d1_constant(clients: Sequence[ClientState], plans: Sequence[RoundPlan]) -> float:
    """``max_r sum_i 9 / (p_i (2 a_i + d_i) gamma_i eta_i Q~_i)``."""
    best = 0.0
    for plan in plans:
        total = 0.0
        for i, c in enumerate(clients):
            qt, _ = qtilde(c.gamma, c.eta, int(plan.Q[i]), strict=False)
            total += 9.0 / (plan.p[i] * (2 * plan.a[i] + plan.d[i]) * c.gamma * c.eta * qt)
        best = max(best, total)
    return best


def average_grad_bound(D1: float, P0: float, f_low: float, beta: float, R: int) -> float:
    """``2 D1 (P0 - f_low) / (beta R)``, the bound on the average squared gradient norm."""
    return 2.0 * D1 * (P0 - f_low) / (beta * R)


# ---------------------------------------------------------------------------
# expected aggregation


@dataclass
class AggregationCheck:
    empirical: np.ndarray
    closed_form: np.ndarray
    deviation: float
    subsets: int


def expected_aggregate_bruteforce(server: ServerState, clients: Sequence[ClientState], m: int,
                                  d_mode: str, Q, a=0.0, max_clients: int = 6) -> AggregationCheck:
    """Average the server update over all ``C(N, m)`` active sets.

    Local models come from full-gradient local rounds, so each client's
    candidate model ``x~_i`` is fixed.  Every subset is pushed through
    :func:`fedcore.server_update` with the given dual stepsize ``a``; the
    average is compared with

    * ``d_mode="N_over_m"``: ``beta sum_i omega_i gamma_i x~_i - beta lam``
    * ``d_mode="one"``: ``(1 - m/N) x0 + (m/N) beta sum_i omega_i gamma_i x~_i - beta lam``

    where ``lam`` is the dual before the round.  The aggregated dual moves
    within the round when ``a > 0``; its expected move
    ``(m/N) beta sum_i omega_i a_i gamma_i (x0 - x~_i)`` is then subtracted
    from the closed form as well.
    """
    N = len(clients)
    if N > max_clients:
        raise ValueError(f"enumeration limited to N <= {max_clients}")
    if not 1 <= m <= N:
        raise ValueError("m out of range")
    if server.beta is None:
        raise ValueError("expected aggregation needs positive penalties")
    if d_mode == "N_over_m":
        d = np.full(N, N / m)
    elif d_mode == "one":
        d = np.ones(N)
    else:
        raise ValueError(f"unknown d_mode {d_mode!r}")
    Q = np.broadcast_to(np.asarray(Q), (N,))
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), (N,))
    x0 = server.x0
    rng = np.random.default_rng(0)
    local = [local_round(c, x0, int(Q[i]), None, rng)[0] for i, c in enumerate(clients)]
    omegas = np.array([c.omega for c in clients])
    gammas = np.array([c.gamma for c in clients])

    subsets = list(itertools.combinations(range(N), m))
    acc = np.zeros_like(x0)
    for A in subsets:
        contribs = [Contribution(i, local[i] - x0, gammas[i], float(a[i])) for i in A]
        acc += server_update(server, contribs, d, omegas, gammas).x0
    empirical = acc / len(subsets)

    beta, lam = server.beta, server.lam
    avg = beta * sum(omegas[i] * gammas[i] * local[i] for i in range(N))
    frac = m / N
    if d_mode == "N_over_m":
        closed = avg - beta * lam
    else:
        closed = (1.0 - frac) * x0 + frac * avg - beta * lam
    if np.any(a != 0):
        closed = closed - frac * beta * sum(omegas[i] * a[i] * gammas[i] * (x0 - local[i]) for i in range(N))
    return AggregationCheck(empirical, closed, float(np.max(np.abs(empirical - closed))), len(subsets))


# ---------------------------------------------------------------------------
# gradient-correction meaning


def correction_quality(clients: Sequence[ClientState], server_lam: np.ndarray, beta: float, x0: np.ndarray,
                       sgs: Sequence[np.ndarray], client: ClientState) -> Tuple[float, float]:
    """Distances of the raw and corrected local directions to the global gradient.

    The local iterates are rebuilt from ``x0`` and the recorded gradients.
    At each of them the raw direction ``g`` and the corrected direction
    ``g + gamma beta lam - lam_i`` are compared with ``grad f`` (full
    gradient over all clients).  Returns the mean distances ``(raw, corrected)``.
    """
    x = np.array(x0, dtype=np.float64)
    shift = client.gamma * beta * server_lam - client.lam
    raw, corr = [], []
    for g in sgs:
        _, gf = global_objective(clients, x)
        raw.append(np.linalg.norm(g - gf))
        corr.append(np.linalg.norm(g + shift - gf))
        x = x - client.eta * (g - client.lam + client.gamma * (x - x0))
    return float(np.mean(raw)), float(np.mean(corr))
