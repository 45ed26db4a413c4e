"""Turn an :class:`~fedvra.config.ExperimentConfig` into a run and stream its metrics as CSV.

CSV contract
------------
Comma separated, UTF-8, LF line endings, one header row, then one row per
round.  Base columns, always present and in this order::

    round, grad_norm_sq, train_loss, test_accuracy, consensus_err, active_count

``round`` is the zero-based round index ``r`` and the other values describe
the global model after that round.  ``diagnostics = true`` appends
``xi_mean, potential``; the ``soft_clustering`` problem appends ``gap``.
Floats are written in their shortest round-trip form; missing values are ``nan``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TextIO

import numpy as np

from .analysis import boundary_params
from .config import ConfigError, ExperimentConfig
from .fedcore import Experiment, MetricsRow, SamplingScheme, run_experiment
from .fedvra_u import boundary_params_u, cluster_dataset, eta_y_bound, init_block_states, run_experiment_u
from .idx import load_idx
from .numerics import BoxSet
from .objectives import make_logistic, make_mlp, make_soft_clustering
from .partition import (PartitionSpec, client_weights, epochs_to_steps, gaussian_class_dataset, hlu_schedule,
                        partition, synth_quadratic_family)
from .presets import PresetContext, apply_preset

BASE_COLUMNS = ("round", "grad_norm_sq", "train_loss", "test_accuracy", "consensus_err", "active_count")
DIAG_COLUMNS = ("xi_mean", "potential")
GAP_COLUMN = "gap"


def csv_columns(cfg: ExperimentConfig) -> List[str]:
    cols = list(BASE_COLUMNS)
    if cfg.diagnostics:
        cols += DIAG_COLUMNS
    if cfg.problem == "soft_clustering":
        cols.append(GAP_COLUMN)
    return cols


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def format_row(row: MetricsRow, columns: Sequence[str]) -> str:
    return ",".join(_fmt(getattr(row, c)) for c in columns) + "\n"


def rounds_to_threshold(accuracies: Sequence[float], threshold: float) -> Optional[int]:
    """Index of the first row with accuracy at least ``threshold`` (``None`` if never)."""
    hits = np.flatnonzero(np.asarray(accuracies, dtype=np.float64) >= threshold)
    return int(hits[0]) if hits.size else None


@dataclass
class PreparedRun:
    """A ready-to-execute run; ``execute(on_row)`` returns the metric rows."""

    cfg: ExperimentConfig
    execute: Callable[[Optional[Callable[[MetricsRow], None]]], List[MetricsRow]]
    gamma: float
    eta: float
    L: Optional[float] = None


def _scheme(cfg: ExperimentConfig) -> SamplingScheme:
    if cfg.p is not None:
        return SamplingScheme("bernoulli", p=tuple([cfg.p] * cfg.N))
    return SamplingScheme("uniform_m", m=cfg.m)


def _participation(cfg: ExperimentConfig) -> float:
    return cfg.p if cfg.p is not None else cfg.m / cfg.N


def _local_table(cfg: ExperimentConfig, sizes: Optional[Sequence[int]]) -> np.ndarray:
    h = cfg.hlu
    table = hlu_schedule(cfg.N, cfg.R, h.mode, h.Q, h.lo, h.hi, seed=cfg.seed)
    if cfg.local_unit == "epochs":
        if sizes is None:
            raise ConfigError(["local_unit: epochs need a data-backed problem"])
        table = epochs_to_steps(table, sizes, cfg.S)
    return table


def _split(shard, test_fraction: float):
    n_test = max(1, int(round(test_fraction * shard.n)))
    idx = np.arange(shard.n)
    return shard.subset(idx[:-n_test]), shard.subset(idx[-n_test:])


def _data_problem(cfg: ExperimentConfig):
    if cfg.problem == "logistic":
        data = gaussian_class_dataset(cfg.num_samples, cfg.num_classes, cfg.seed)
    else:
        for key in ("mnist_images", "mnist_labels"):
            if not Path(getattr(cfg, key)).is_file():
                raise ConfigError([f"{key}: file not found: {getattr(cfg, key)}"])
        data = load_idx(cfg.mnist_images, cfg.mnist_labels)
    train, test = _split(data, cfg.test_fraction)
    shards = partition(train, PartitionSpec(cfg.partition, cfg.N, cfg.alpha, cfg.seed))
    if cfg.problem == "logistic":
        objs = [make_logistic(s, cfg.l2, cfg.num_classes) for s in shards]
        x0 = np.zeros(objs[0].dim)
    else:
        objs = [make_mlp(s, cfg.hidden, cfg.num_classes, cfg.l2) for s in shards]
        x0 = objs[0].initial_point(np.random.default_rng(cfg.seed))
    evaluate = lambda x: objs[0].accuracy(x, test)
    return objs, x0, client_weights(shards, cfg.weights), [s.n for s in shards], evaluate


def _auto_params(cfg: ExperimentConfig, L: float, Q_max: int):
    if cfg.algorithm != "fedvra" or cfg.a <= 0:
        raise ConfigError(["gamma: auto is only available for the fedvra algorithm with a > 0"])
    p = _participation(cfg)
    d = cfg.d if cfg.d is not None else 1.0 / p
    return boundary_params(L, p, cfg.a, d, Q_max)


def prepare(cfg: ExperimentConfig) -> PreparedRun:
    """Build data, objectives, schedules and parameters for ``cfg``."""
    if cfg.problem == "soft_clustering":
        return _prepare_block(cfg)
    if cfg.problem == "quadratic_family":
        objs = synth_quadratic_family(cfg.N, cfg.dim, cfg.heterogeneity, cfg.seed,
                                      center=np.full(cfg.dim, cfg.center), curvature=cfg.curvature)
        x0, omegas, sizes, evaluate = np.zeros(cfg.dim), np.full(cfg.N, 1.0 / cfg.N), None, None
    else:
        objs, x0, omegas, sizes, evaluate = _data_problem(cfg)
    table = _local_table(cfg, sizes)
    gamma, eta, L = cfg.gamma, cfg.eta, None
    if gamma is None:
        L = max(o.smoothness_L for o in objs)
        gamma, eta = _auto_params(cfg, L, int(table.max()))
    ctx = PresetContext(cfg.N, omegas, table, gamma, eta, m=cfg.m if cfg.p is None else None, a=cfg.a, d=cfg.d)
    preset = apply_preset(cfg.algorithm, ctx)

    def execute(on_row=None):
        exp = Experiment(objs, x0, omegas, preset.gammas, preset.etas, preset.plan, _scheme(cfg), cfg.R, cfg.S,
                         cfg.seed, sampling=cfg.sampling, evaluate=evaluate, diagnostics=cfg.diagnostics,
                         eval_stride=cfg.eval_stride, workers=cfg.workers, on_row=on_row)
        return run_experiment(exp).rows

    return PreparedRun(cfg, execute, float(gamma), float(eta), L)


def _prepare_block(cfg: ExperimentConfig) -> PreparedRun:
    shards, _ = cluster_dataset(cfg.N, cfg.K, cfg.n_per_client, cfg.seed)
    objs = [make_soft_clustering(s, cfg.K, cfg.box_radius) for s in shards]
    box = BoxSet.symmetric(cfg.box_radius)
    omegas = client_weights(shards, cfg.weights)
    table = _local_table(cfg, [s.n for s in shards])
    L = max(o.smoothness_L for o in objs)
    p = _participation(cfg)
    d = cfg.d if cfg.d is not None else 1.0 / p
    q_x = int(table.max())
    gamma, eta, eta_y = cfg.gamma, cfg.eta, cfg.eta_y
    if gamma is None:
        if cfg.algorithm != "fedvra":
            raise ConfigError(["gamma: auto is only available for the fedvra algorithm"])
        gamma, eta, eta_y_auto = boundary_params_u(L, p, cfg.a, d, q_x, cfg.q_y)
        eta_y = eta_y_auto if eta_y is None else eta_y
    elif eta_y is None:
        eta_y = 0.9 * eta_y_bound(L, cfg.a, gamma, eta, q_x, cfg.q_y, 1.0 / gamma)
    ctx = PresetContext(cfg.N, omegas, table, gamma, eta, m=cfg.m if cfg.p is None else None, a=cfg.a, d=cfg.d)
    preset = apply_preset(cfg.algorithm, ctx)

    # start from K random data points, private blocks softly assigned to the nearest one
    pooled = np.concatenate([s.features for s in shards])
    rng = np.random.default_rng(cfg.seed)
    x0 = pooled[rng.choice(pooled.shape[0], size=cfg.K, replace=False)].ravel()
    y0 = [0.95 * o.nearest_assignment(x0) + 0.05 / cfg.K for o in objs]

    def plan_fn(r, active, probs):
        plan = preset.plan(r, active, probs)
        return replace(plan, Q=np.asarray(plan.Q) + cfg.q_y)

    def execute(on_row=None):
        server, clients = init_block_states(objs, x0, y0, omegas, preset.gammas, preset.etas, eta_y, cfg.q_y, box)
        rows, _, _ = run_experiment_u(server, clients, plan_fn, _scheme(cfg), cfg.R, cfg.S, cfg.seed, box,
                                      sampling=cfg.sampling, eval_stride=cfg.eval_stride, on_row=on_row)
        return rows

    return PreparedRun(cfg, execute, float(gamma), float(eta), L)


def summary_line(cfg: ExperimentConfig, rows: Sequence[MetricsRow], status: str = "ok") -> str:
    parts = [f"status={status}", f"problem={cfg.problem}", f"algorithm={cfg.algorithm}", f"rounds={len(rows)}"]
    if rows:
        last = rows[-1]
        parts.append(f"final_grad_norm_sq={_fmt(last.grad_norm_sq)}")
        parts.append(f"final_train_loss={_fmt(last.train_loss)}")
        if cfg.problem in ("logistic", "mlp_mnist"):
            parts.append(f"final_test_accuracy={_fmt(last.test_accuracy)}")
        if cfg.problem == "soft_clustering":
            parts.append(f"final_gap={_fmt(last.gap)}")
    if cfg.problem in ("logistic", "mlp_mnist"):
        acc = [r.test_accuracy for r in rows]
        for t in cfg.acc_thresholds:
            k = rounds_to_threshold(acc, t)
            parts.append(f"#R-{round(100 * t):d}={'-' if k is None else k}")
    return " ".join(parts)


def write_rows(stream: TextIO, columns: Sequence[str]) -> Callable[[MetricsRow], None]:
    """Row callback that appends each row to ``stream`` and flushes it."""
    def on_row(row: MetricsRow):
        stream.write(format_row(row, columns))
        stream.flush()
    return on_row
