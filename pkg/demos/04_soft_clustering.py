"""Federated soft clustering with private assignments.

Each client keeps its own soft assignment matrix on the probability simplex
and never uploads it.  The shared cluster centers live in a box.  A round
takes one projected step on the assignments, then dual-corrected steps on
the centers, and the server projects its update back into the box.  The
printed gap is the stationarity measure for the constrained problem.
"""

import numpy as np

from fedvra.fedcore import RoundPlan, SamplingScheme
from fedvra.fedvra_u import boundary_params_u, cluster_dataset, init_block_states, run_experiment_u
from fedvra.numerics import BoxSet
from fedvra.objectives import make_soft_clustering

N, K, R, m = 10, 3, 1500, 8
p, a, d = m / N, 40.0, N / m
box = BoxSet.symmetric(1.5)
shards, centers = cluster_dataset(N, K, 30, 0)
objs = [make_soft_clustering(s, K, 1.5) for s in shards]
L = max(o.smoothness_L for o in objs)
gamma, eta, eta_y = boundary_params_u(L, p, a, d, 1, 1)
print(f"L={L:.3f} gamma={gamma:.2f} eta={eta:.3e} eta_y={eta_y:.3e}")

rng = np.random.default_rng(1)
x0 = (centers + 0.1 * rng.standard_normal(centers.shape)).ravel()
y0 = [0.95 * o.nearest_assignment(x0) + 0.05 / K for o in objs]
server, clients = init_block_states(objs, x0, y0, np.full(N, 1.0 / N), gamma, eta, eta_y, 1, box)


def plan(r, active, probs):
    # one assignment step plus one center step
    return RoundPlan(active, probs, np.full(N, 2), a, d)


rows, server, clients = run_experiment_u(server, clients, plan, SamplingScheme("uniform_m", m=m), R, None, 0, box)
print(f"{'round':>6} {'gap':>10} {'loss':>10}")
for r in (0, 100, 300, 600, 900, R - 1):
    print(f"{r:6d} {rows[r].gap:10.3e} {rows[r].train_loss:10.4f}")
print("centers found:\n", np.round(server.x0.reshape(K, -1), 3))
print("true centers:\n", np.round(centers, 3))
