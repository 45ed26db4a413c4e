"""Experiment configuration: a flat ``key = value`` text format.

Grammar
-------
* one ``key = value`` (or ``key: value``) pair per line, keys case-insensitive;
* ``#`` or ``;`` starts a comment line, blank lines are ignored;
* no sections (the parser supplies one internally), each key at most once.

Values are validated against the table in :data:`FIELDS`; all problems are
collected and reported together in a :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

from .presets import PRESET_NAMES

PROBLEMS = ("quadratic_family", "logistic", "mlp_mnist", "soft_clustering")


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class HLUSpec:
    mode: str = "fixed"
    Q: int = 1
    lo: int = 1
    hi: int = 5

    def __str__(self):
        return f"fixed:{self.Q}" if self.mode == "fixed" else f"uniform:{self.lo}:{self.hi}"


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "quadratic_family"
    N: int = 10
    m: Optional[int] = 2
    p: Optional[float] = None
    R: int = 10
    S: Optional[int] = None
    seed: int = 0
    algorithm: str = "fedvra"
    a: float = 1.0
    d: Optional[float] = None
    gamma: Optional[float] = 1.0
    eta: float = 0.01
    partition: str = "dirichlet"
    alpha: float = 0.2
    hlu: HLUSpec = field(default_factory=HLUSpec)
    local_unit: str = "steps"
    sampling: str = "iid"
    weights: str = "data"
    diagnostics: bool = False
    output: str = "metrics.csv"
    eval_stride: int = 1
    workers: int = 1
    acc_thresholds: Tuple[float, ...] = (0.6, 0.9)
    # quadratic family
    dim: int = 10
    heterogeneity: float = 5.0
    curvature: str = "identity"
    center: float = 1.0
    # classification data
    num_samples: int = 2000
    num_classes: int = 10
    l2: float = 0.0
    hidden: int = 200
    mnist_images: str = "data/mnist10k-images-idx3-ubyte.gz"
    mnist_labels: str = "data/mnist10k-labels-idx1-ubyte.gz"
    test_fraction: float = 0.2
    # soft clustering
    K: int = 3
    box_radius: float = 1.5
    n_per_client: int = 30
    q_y: int = 1
    eta_y: Optional[float] = None


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _opt_int_full(v):
    return None if v.lower() == "full" else int(v)


def _opt_float_auto(v):
    return None if v.lower() == "auto" else float(v)


def _bool(v):
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


def _hlu(v):
    parts = v.split(":")
    if parts[0] == "fixed" and len(parts) == 2:
        return HLUSpec("fixed", Q=int(parts[1]))
    if parts[0] == "uniform" and len(parts) == 3:
        return HLUSpec("uniform", lo=int(parts[1]), hi=int(parts[2]))
    raise ValueError("expected fixed:<Q> or uniform:<lo>:<hi>")


def _floats(v):
    return tuple(float(t) for t in v.split(",") if t.strip())


FIELDS: Dict[str, Any] = {
    "problem": _choice(*PROBLEMS), "N": _int, "m": _int, "p": _float, "R": _int, "S": _opt_int_full,
    "seed": _int, "algorithm": _choice(*PRESET_NAMES), "a": _float, "d": _opt_float_auto,
    "gamma": _opt_float_auto, "eta": _float, "partition": _choice("iid", "dirichlet"), "alpha": _float,
    "hlu": _hlu, "local_unit": _choice("steps", "epochs"), "sampling": _choice("iid", "epoch"),
    "weights": _choice("data", "uniform"), "diagnostics": _bool, "output": str, "eval_stride": _int,
    "workers": _int, "acc_thresholds": _floats, "dim": _int, "heterogeneity": _float,
    "curvature": _choice("identity", "random"), "center": _float, "num_samples": _int,
    "num_classes": _int, "l2": _float, "hidden": _int, "mnist_images": str, "mnist_labels": str,
    "test_fraction": _float, "K": _int, "box_radius": _float, "n_per_client": _int, "q_y": _int,
    "eta_y": _opt_float_auto,
}
_CANON = {k.lower(): k for k in FIELDS}


def validate(cfg: ExperimentConfig) -> List[str]:
    errs = []
    if cfg.N < 1:
        errs.append("N must be at least 1")
    if cfg.p is not None:
        if not 0 < cfg.p <= 1:
            errs.append("p out of range (0, 1]")
    elif cfg.m is None or not 1 <= cfg.m <= cfg.N:
        errs.append("m out of range")
    if cfg.R < 0:
        errs.append("R must be non-negative")
    if cfg.S is not None and cfg.S < 1:
        errs.append("S must be positive or 'full'")
    if cfg.a < 0:
        errs.append("a must be non-negative")
    if cfg.d is not None and cfg.d <= 0:
        errs.append("d must be positive")
    if cfg.gamma is not None and cfg.gamma < 0:
        errs.append("gamma must be non-negative")
    if cfg.eta <= 0:
        errs.append("eta must be positive")
    if cfg.alpha <= 0:
        errs.append("alpha must be positive")
    if cfg.hlu.mode == "fixed" and cfg.hlu.Q < 1:
        errs.append("hlu Q must be at least 1")
    if cfg.hlu.mode == "uniform" and not 1 <= cfg.hlu.lo <= cfg.hlu.hi:
        errs.append("hlu range must satisfy 1 <= lo <= hi")
    if cfg.eval_stride < 1:
        errs.append("eval_stride must be at least 1")
    if cfg.workers < 1:
        errs.append("workers must be at least 1")
    if cfg.dim < 1 or cfg.K < 1 or cfg.num_classes < 2 or cfg.hidden < 1:
        errs.append("dim, K, hidden must be positive and num_classes at least 2")
    if not 0 < cfg.test_fraction < 1:
        errs.append("test_fraction out of range (0, 1)")
    if cfg.q_y < 0:
        errs.append("q_y must be non-negative")
    if cfg.problem == "soft_clustering" and cfg.p is None and cfg.m == cfg.N:
        errs.append("soft_clustering needs partial participation (m < N)")
    if cfg.algorithm in ("fedavg", "fednova") and cfg.problem == "soft_clustering":
        errs.append(f"{cfg.algorithm} has zero penalty, which the constrained variant does not support")
    return errs


def parse_config(text: str, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Parse and validate a configuration document; ``overrides`` replace raw values first."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), strict=True)
    parser.optionxform = str.lower
    errors: List[str] = []
    try:
        parser.read_string("[run]\n" + text)
        raw = dict(parser["run"])
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc.message if hasattr(exc, 'message') else exc}"]) from None
    for k, v in (overrides or {}).items():
        raw[k.lower()] = str(v)
    values = {}
    for key, val in raw.items():
        canon = _CANON.get(key)
        if canon is None:
            errors.append(f"unknown key {key!r}")
            continue
        try:
            values[canon] = FIELDS[canon](val.strip())
        except ValueError as exc:
            errors.append(f"{canon}: {exc}")
    if errors:
        raise ConfigError(errors)
    if "p" in values and "m" not in values:
        values["m"] = None
    cfg = replace(ExperimentConfig(), **values)
    errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def format_config(cfg: ExperimentConfig) -> str:
    """Render a config back to the text format (``None`` as ``auto``/``full``)."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            if f.name == "S":
                v = "full"
            elif f.name in ("m", "p"):
                continue
            else:
                v = "auto"
        elif isinstance(v, tuple):
            v = ",".join(repr(t) for t in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
