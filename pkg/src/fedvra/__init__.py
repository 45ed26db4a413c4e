"""Federated primal-dual optimization with adaptive dual and aggregation stepsizes.

Modules
-------
numerics    vectors, finiteness guards, box and simplex projections
objectives  client losses (quadratic, logistic, MLP, soft clustering) and stochastic gradients
partition   IID/Dirichlet shards, synthetic families, local-update schedules
fedcore     the round engine: sampling, local steps, dual and server updates
presets     parameter rules for classical methods and direct reference implementations
fedvra_u    the two-block constrained variant
analysis    local-recursion identities, convergence conditions, potential diagnostics
config, runner, cli, verify, idx
            experiment configuration, orchestration, command line, oracle suites, MNIST IDX files
"""

from .fedcore import (ClientState, DivergenceError, Experiment, MetricsRow, RoundPlan, SamplingScheme,
                      ServerState, run_experiment, run_round)
from .presets import PRESET_NAMES, PresetContext, apply_preset

__version__ = "0.1.0"

__all__ = ["ClientState", "DivergenceError", "Experiment", "MetricsRow", "RoundPlan", "SamplingScheme",
           "ServerState", "run_experiment", "run_round", "PRESET_NAMES", "PresetContext", "apply_preset"]
