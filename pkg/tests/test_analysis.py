import math

import numpy as np
import pytest

from fedvra.analysis import (average_grad_bound, correction_quality, d1_constant, diagnostics,
                             expected_aggregate_bruteforce, feasibility_check, lemma1_check, qtilde, qtilde_closed,
                             record_trace, step_products, suggest_params)
from fedvra.fedcore import ClientState, RoundPlan, global_objective, init_states, local_round, run_round
from fedvra.objectives import make_quadratic
from fedvra.verify import random_quadratic


# --- Q~ -------------------------------------------------------------------


def test_qtilde_examples():
    assert qtilde(3.0, 0.1, 1) == (1.0, pytest.approx(np.array([1.0])))
    assert qtilde(0.0, 0.3, 5)[0] == 5.0
    qt, b = qtilde(1.0, 0.5, 3)
    np.testing.assert_array_equal(b, [0.25, 0.5, 1.0])
    assert qt == 1.75
    assert qtilde_closed(1.0, 0.5, 3) == pytest.approx(1.75, abs=1e-15)


def test_qtilde_range_and_last_weight():
    for ge in np.linspace(0.0, 1.0, 11):
        for Q in (1, 4, 9):
            qt, b = qtilde(ge, 1.0, Q)
            assert b[-1] == 1.0
            assert 1.0 <= qt <= Q
            assert np.all((b >= 0) & (b <= 1))


def test_qtilde_closed_form_on_grid():
    for ge in np.linspace(0.0, 1.0, 22)[1:-1]:
        for Q in range(1, 11):
            assert qtilde(ge, 1.0, Q)[0] == pytest.approx(qtilde_closed(ge, 1.0, Q), abs=1e-12)


def test_qtilde_rejects_large_product():
    with pytest.raises(ValueError):
        qtilde(2.0, 0.6, 3)
    with pytest.raises(ValueError):
        qtilde(1.0, 0.1, 0)


# --- local identities -------------------------------------------------------


def traced(rng, Q, a, gamma_eta=0.4):
    obj = random_quadratic(rng, 5, n=9)
    eta = 0.5 / obj.smoothness_L
    client = ClientState(0, obj, rng.standard_normal(5), 1.0, gamma_eta / eta, eta)
    return record_trace(client, rng.standard_normal(5), Q, a, 3, rng)


def test_single_step_identity_exact():
    rng = np.random.default_rng(0)
    assert lemma1_check(traced(rng, 1, 0.0), 0.0) == 0.0
    assert lemma1_check(traced(rng, 1, 2.0), 2.0) <= 1e-15


def test_zero_dual_step_keeps_dual_form_exact():
    tr = traced(np.random.default_rng(1), 6, 0.0)
    np.testing.assert_array_equal(tr.lam_new, tr.lam)


def test_closed_forms_on_recorded_gradients():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        Q = int(rng.integers(1, 11))
        a = float(rng.uniform(0, 5))
        tr = traced(rng, Q, a, gamma_eta=float(rng.uniform(0.01, 0.99)))
        worst = max(worst, lemma1_check(tr, a))
    assert worst <= 1e-10


def test_wrong_dual_step_is_detected():
    tr = traced(np.random.default_rng(3), 4, 1.5)
    assert lemma1_check(tr, 1.0) > 1e-6


def test_incomplete_trace_rejected():
    tr = traced(np.random.default_rng(4), 2, 1.0)
    tr.lam_new = None
    with pytest.raises(ValueError):
        lemma1_check(tr, 1.0)


# --- conditions -----------------------------------------------------------


def test_suggest_params_examples():
    gamma, eta = suggest_params(1.0, 0.1, 7.0, 10.0, 2)
    assert gamma == pytest.approx(680.0, rel=1e-14)
    assert eta == pytest.approx(1 / 46240, rel=1e-14)
    assert gamma * eta * 2 == pytest.approx(1 / 34, rel=1e-14)
    gamma, eta = suggest_params(1.0, 1.0, 1.0, 1.0, 1)
    assert (gamma, eta) == (pytest.approx(56.0), pytest.approx(1 / 224))


def test_suggest_params_always_feasible():
    rng = np.random.default_rng(0)
    for _ in range(200):
        L, p = rng.uniform(0.01, 100), rng.uniform(0.01, 1.0)
        a, d, Q = rng.uniform(0.1, 20), rng.uniform(0.1, 20), int(rng.integers(1, 50))
        if 2 * (a + d) * Q < 1:
            continue
        gamma, eta = suggest_params(L, p, a, d, Q)
        assert feasibility_check(L, p, a, d, gamma, eta, Q).passed


def test_suggest_params_errors():
    with pytest.raises(ValueError):
        suggest_params(1.0, 0.5, 0.0, 1.0, 1)
    with pytest.raises(ValueError):
        suggest_params(1.0, 1.5, 1.0, 1.0, 1)
    with pytest.raises(ValueError):
        suggest_params(1.0, 0.5, 0.1, 0.1, 1)


def test_feasibility_perturbations_fail_right_branch():
    L, p, a, d, Q = 1.0, 0.1, 7.0, 10.0, 2
    gamma, eta = suggest_params(L, p, a, d, Q)
    bad = feasibility_check(L, p, a, d, gamma, 2.0 / gamma, Q)
    assert "eta_penalty" in bad.failing()
    bad = feasibility_check(L, p, a, d, L, eta, Q)
    assert "penalty" in bad.failing()
    assert bad.conditions["penalty"].slack < 0


def test_penalty_condition_undefined_without_dual_step():
    with pytest.raises(ValueError):
        feasibility_check(1.0, 0.5, 0.0, 1.0, 10.0, 0.01, 2)
    rep = feasibility_check(1.0, 0.5, 0.0, 1.0, 10.0, 0.01, 2, check_penalty=False)
    assert rep.conditions["penalty"].passed is None
    assert math.isnan(rep.conditions["penalty"].slack)


# --- diagnostics ----------------------------------------------------------


@pytest.fixture
def family():
    rng = np.random.default_rng(5)
    objs = [make_quadratic(np.diag(rng.uniform(0.5, 2.0, 3)), rng.standard_normal(3)) for _ in range(4)]
    return objs, rng.standard_normal(3)


def test_zero_dual_residual(family):
    objs, x0 = family
    lam = [o.full_grad(x0) for o in objs]
    server, clients = init_states(objs, x0, np.full(4, 0.25), 2.0, 0.1, lam)
    diag = diagnostics(server, clients, RoundPlan(np.arange(4), 0.5, np.full(4, 3), 1.0, 2.0))
    np.testing.assert_array_equal(diag.Xi, 0.0)
    assert diag.P == diag.f == pytest.approx(global_objective(clients, x0)[0])


def test_residual_with_zero_duals(family):
    objs, x0 = family
    server, clients = init_states(objs, x0, np.full(4, 0.25), 2.0, 0.1)
    diag = diagnostics(server, clients, RoundPlan(np.arange(4), 0.5, np.full(4, 3), 1.0, 2.0))
    expect = [np.sum((o.A @ (x0 - o.c)) ** 2) for o in objs]
    np.testing.assert_allclose(diag.Xi, expect, rtol=1e-14)
    # d = 1/p holds; (a + d) gamma eta Q~ = 3 * 0.488 exceeds one
    assert diag.d_is_inverse_p and not diag.c1_at_most_one


def test_step_products_two_ways(family):
    objs, x0 = family
    gamma, eta, a, Q = 2.0, 0.1, 1.5, 4
    _, clients = init_states(objs, x0, np.full(4, 0.25), gamma, eta)
    C1, C2 = step_products(clients, RoundPlan(np.arange(4), 1.0, np.full(4, Q), a, 1.0))
    np.testing.assert_allclose(C2, a * (1 - (1 - gamma * eta) ** Q), atol=1e-12)
    np.testing.assert_allclose(C1, (a + 1.0) * (1 - (1 - gamma * eta) ** Q), atol=1e-12)


def potential_run(R=500):
    rng = np.random.default_rng(8)
    N = 3
    objs = [random_quadratic(rng, 3, n=6) for _ in range(N)]
    L = max(o.smoothness_L for o in objs)
    a, d, Q = 1.0, 1.0, 2
    gamma, eta = suggest_params(L, 1.0, a, d, Q)
    server, clients = init_states(objs, 3 * rng.standard_normal(3), np.full(N, 1 / N), gamma, eta)
    plan = RoundPlan(np.arange(N), 1.0, np.full(N, Q), a, d)
    P = [diagnostics(server, clients, plan).P]
    grads = [global_objective(clients, server.x0)[1]]
    f_low = global_objective(clients, np.linalg.solve(sum(o.A for o in objs), sum(o.A @ o.c for o in objs)))[0]
    D1 = d1_constant(clients, [plan])
    beta = server.beta
    for r in range(R):
        res = run_round(server, clients, plan, None, r)
        server, clients = res.server, res.clients
        P.append(diagnostics(server, clients, plan).P)
        grads.append(global_objective(clients, server.x0)[1])
    return np.array(P), grads, D1, f_low, beta


def test_potential_never_increases():
    P, *_ = potential_run()
    assert np.all(np.diff(P) <= 1e-12)


def test_average_gradient_within_bound():
    P, grads, D1, f_low, beta = potential_run()
    R = len(grads) - 1
    measured = np.mean([np.sum(g ** 2) for g in grads[:R]])
    assert measured <= average_grad_bound(D1, P[0], f_low, beta, R)


# --- expected aggregation -------------------------------------------------


def test_full_participation_expectation_is_the_outcome(family):
    objs, x0 = family
    server, clients = init_states(objs[:2], x0, [0.3, 0.7], [1.0, 2.0], 0.1, [np.ones(3), -np.ones(3)])
    chk = expected_aggregate_bruteforce(server, clients, 2, "one", Q=3)
    assert chk.subsets == 1
    assert chk.deviation <= 1e-12


@pytest.mark.parametrize("mode", ["one", "N_over_m"])
@pytest.mark.parametrize("a", [0.0, 0.8])
def test_expected_aggregation_closed_forms(mode, a):
    rng = np.random.default_rng(9)
    objs = [random_quadratic(rng, 3) for _ in range(4)]
    lam = [rng.standard_normal(3) for _ in range(4)]
    server, clients = init_states(objs, rng.standard_normal(3), rng.dirichlet(np.ones(4)),
                                  rng.uniform(0.5, 2, 4), 0.05, lam)
    chk = expected_aggregate_bruteforce(server, clients, 2, mode, Q=3, a=a)
    assert chk.subsets == 6
    assert chk.deviation <= 1e-12


def test_enumeration_size_limit(family):
    objs, x0 = family
    server, clients = init_states(objs * 2, x0, np.full(8, 1 / 8), 1.0, 0.1)
    with pytest.raises(ValueError):
        expected_aggregate_bruteforce(server, clients, 2, "one", Q=1)


# --- correction meaning -----------------------------------------------------


def test_corrected_direction_tracks_global_gradient():
    rng = np.random.default_rng(10)
    objs = [make_quadratic(np.diag(rng.uniform(0.5, 2.0, 4)), 3 * rng.standard_normal(4)) for _ in range(2)]
    server, clients = init_states(objs, np.zeros(4), [0.5, 0.5], 1.0, 0.1)
    plan = RoundPlan([0, 1], 1.0, [5, 5], 1.0, 1.0)
    raw, corr = [], []
    for r in range(100):
        if r >= 10:
            for c in clients:
                _, sgs = local_round(c, server.x0, 5, None, rng, trace=True)
                q = correction_quality(clients, server.lam, server.beta, server.x0, sgs, c)
                raw.append(q[0])
                corr.append(q[1])
        res = run_round(server, clients, plan, None, r)
        server, clients = res.server, res.clients
    assert np.mean(corr) < np.mean(raw)
