"""Label-skewed clients on a multiclass logistic model.

Fifty clients receive Dirichlet(0.2) label mixtures, so most see only four to
six of the ten classes.  Each round five clients run between one and five local
epochs.  The table tracks test accuracy for FedVRA and FedAvg under the same
stepsize.
"""

import numpy as np

from fedvra.fedcore import Experiment, SamplingScheme, run_experiment
from fedvra.objectives import make_logistic
from fedvra.partition import (PartitionSpec, client_weights, epochs_to_steps, gaussian_class_dataset, hlu_schedule,
                              partition)
from fedvra.presets import PresetContext, apply_preset

SEED, N, m, S, R = 0, 50, 5, 50, 120
data = gaussian_class_dataset(5000, 10, SEED)
train, test = data.subset(np.arange(4000)), data.subset(np.arange(4000, 5000))
shards = partition(train, PartitionSpec("dirichlet", N, 0.2, SEED))
print("classes per client:", np.bincount([len(np.unique(s.labels)) for s in shards], minlength=11)[1:])

objs = [make_logistic(s, 0.0, 10) for s in shards]
omegas = client_weights(shards)
Q = epochs_to_steps(hlu_schedule(N, R, "uniform", lo=1, hi=5, seed=SEED), [s.n for s in shards], S)


def accuracy(name):
    pre = apply_preset(name, PresetContext(N, omegas, Q, 0.1, 0.05, m=m, a=7.0))
    exp = Experiment(objs, np.zeros(objs[0].dim), omegas, pre.gammas, pre.etas, pre.plan,
                     SamplingScheme("uniform_m", m=m), R, S, SEED, sampling="epoch",
                     evaluate=lambda x: objs[0].accuracy(x, test), eval_stride=R + 1)
    return [r.test_accuracy for r in run_experiment(exp).rows]


vra, avg = accuracy("fedvra"), accuracy("fedavg")
print(f"{'round':>6} {'FedVRA':>8} {'FedAvg':>8}")
for r in range(0, R, 15):
    print(f"{r:6d} {vra[r]:8.3f} {avg[r]:8.3f}")
