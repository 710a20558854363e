"""Experiment configuration: a single JSON document, schema-checked.

Validation errors name the exact field path (e.g. "data.partition.alpha:
must be > 0") so config mistakes are one-glance fixable. Defaults follow
the benchmark protocol: an 11-point epsilon grid from 0.0 to 0.040 in
steps of 0.004, agreement fractions {0.6, 0.75, 0.9}, 1000 DP buckets at
epsilon 0.1, and percentiles {25, 50, 75, 90, 99}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .metrics import DEFAULT_PERCENTILES, SCORE_METRICS

__all__ = ["ExperimentConfig", "load_config", "parse_config"]

DEFAULT_EPSILON_GRID = tuple(round(0.004 * i, 3) for i in range(11))
DEFAULT_T_GRID = (0.6, 0.75, 0.9)
DEFAULT_DEFINITIONS = ("global", "t_agreement", "individual")
ALL_METRICS = ("ambiguity", "discrepancy") + SCORE_METRICS


def _fail(path: str, message: str):
    raise ConfigError(f"{path}: {message}")


def _expect(cond: bool, path: str, message: str):
    if not cond:
        _fail(path, message)


def _get(obj: dict, path: str, key: str, kind, default=None, required: bool = False):
    here = f"{path}.{key}" if path else key
    if key not in obj:
        if required:
            _fail(here, "missing required field")
        return default
    val = obj[key]
    if kind is float:
        _expect(isinstance(val, (int, float)) and not isinstance(val, bool), here, "must be a number")
        val = float(val)
        _expect(math.isfinite(val), here, "must be finite")
    elif kind is int:
        _expect(isinstance(val, int) and not isinstance(val, bool), here, "must be an integer")
    elif kind is bool:
        _expect(isinstance(val, bool), here, "must be a boolean")
    elif kind is str:
        _expect(isinstance(val, str), here, "must be a string")
    elif kind is list:
        _expect(isinstance(val, list), here, "must be a list")
    elif kind is dict:
        _expect(isinstance(val, dict), here, "must be an object")
    return val


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int
    output_dir: str | None
    # data
    source: str  # "synthetic" | "csv"
    synthetic: dict | None
    csv: dict | None
    n_clients: int
    alpha: float
    split_fractions: tuple
    # pool
    arch: str
    d_hidden: int
    grid_seeds: tuple
    grid_ratios: tuple
    grid_epochs: tuple
    rounds: int
    lr: float
    batch_size: int
    algorithm: str
    strict_paper_weights: bool
    # rashomon
    epsilon_grid: tuple
    t_grid: tuple
    definitions: tuple
    eval_clients: tuple | None  # None = all
    individual_clients: object  # "all" | tuple of ids | int sample count
    weighted_aggregation: bool
    # metrics
    metrics: tuple
    path: str  # "trusted" | "dp"
    dp_epsilon: float
    n_buckets: int
    percentiles: tuple
    tau: float
    emit_exponentiated_rc: bool
    rc_tolerance: float
    rc_max_iters: int
    # fairness (None = stage disabled)
    fairness_sample_k: int | None
    raw: dict = field(repr=False, default_factory=dict)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw, base_dir=path.parent)


def parse_config(raw: dict, base_dir=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root: must be a JSON object")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    master_seed = _get(raw, "", "master_seed", int, default=0)
    output_dir = _get(raw, "", "output_dir", str)

    data = _get(raw, "", "data", dict, required=True)
    source = _get(data, "data", "source", str, required=True)
    _expect(source in ("synthetic", "csv"), "data.source", "must be 'synthetic' or 'csv'")
    synthetic = csv_section = None
    if source == "synthetic":
        synthetic = dict(_get(data, "data", "synthetic", dict, required=True))
        n = _get(synthetic, "data.synthetic", "n", int, required=True)
        d_in = _get(synthetic, "data.synthetic", "d_in", int, required=True)
        d_out = _get(synthetic, "data.synthetic", "d_out", int, default=2)
        sep = _get(synthetic, "data.synthetic", "class_separation", float, default=1.0)
        rate = _get(synthetic, "data.synthetic", "sensitive_rate", float)
        _expect(n >= d_out >= 2, "data.synthetic.n", "need n >= d_out >= 2")
        _expect(d_in >= 1, "data.synthetic.d_in", "must be >= 1")
        _expect(sep >= 0, "data.synthetic.class_separation", "must be >= 0")
        if rate is not None:
            _expect(0 < rate < 1, "data.synthetic.sensitive_rate", "must be in (0, 1)")
        synthetic = {"n": n, "d_in": d_in, "d_out": d_out, "class_separation": sep,
                     "sensitive_rate": rate}
    else:
        csv_section = dict(_get(data, "data", "csv", dict, required=True))
        for key in ("path", "label_column", "schema"):
            _get(csv_section, "data.csv", key, str, required=True)
        csv_section.setdefault("sensitive_column", None)
        for key in ("path", "schema"):
            resolved = (base_dir / csv_section[key]).resolve()
            _expect(resolved.exists(), f"data.csv.{key}", f"file does not exist: {resolved}")
            csv_section[key] = str(resolved)

    part = _get(data, "data", "partition", dict, required=True)
    n_clients = _get(part, "data.partition", "n_clients", int, required=True)
    alpha = _get(part, "data.partition", "alpha", float, required=True)
    fractions = tuple(_get(part, "data.partition", "split_fractions", list, default=[0.7, 0.1, 0.2]))
    _expect(n_clients >= 1, "data.partition.n_clients", "must be >= 1")
    _expect(alpha > 0, "data.partition.alpha", "must be > 0")
    _expect(
        len(fractions) == 3
        and all(isinstance(f, (int, float)) and f > 0 for f in fractions)
        and abs(sum(fractions) - 1) < 1e-9,
        "data.partition.split_fractions",
        "must be three positive numbers summing to 1",
    )

    pool = _get(raw, "", "pool", dict, required=True)
    model = _get(pool, "pool", "model", dict, default={"arch": "linear"})
    arch = _get(model, "pool.model", "arch", str, default="linear")
    _expect(arch in ("linear", "mlp"), "pool.model.arch", "must be 'linear' or 'mlp'")
    d_hidden = _get(model, "pool.model", "d_hidden", int, default=0)
    if arch == "mlp":
        _expect(d_hidden >= 1, "pool.model.d_hidden", "mlp needs d_hidden >= 1")
    grid = _get(pool, "pool", "grid", dict, required=True)
    seeds = tuple(_get(grid, "pool.grid", "seeds", list, required=True))
    ratios = tuple(_get(grid, "pool.grid", "participation_ratios", list, default=[1.0]))
    epochs = tuple(_get(grid, "pool.grid", "local_epochs", list, default=[1]))
    _expect(bool(seeds), "pool.grid.seeds", "must be non-empty")
    _expect(all(isinstance(s, int) for s in seeds), "pool.grid.seeds", "must be integers")
    _expect(all(0 < r <= 1 for r in ratios), "pool.grid.participation_ratios", "must be in (0, 1]")
    _expect(all(isinstance(e, int) and e >= 1 for e in epochs), "pool.grid.local_epochs", "must be integers >= 1")
    base = _get(pool, "pool", "base", dict, required=True)
    rounds = _get(base, "pool.base", "rounds", int, required=True)
    lr = _get(base, "pool.base", "lr", float, required=True)
    batch_size = _get(base, "pool.base", "batch_size", int, default=32)
    algorithm = _get(base, "pool.base", "algorithm", str, default="fedavg")
    _expect(rounds >= 1, "pool.base.rounds", "must be >= 1")
    _expect(lr > 0, "pool.base.lr", "must be > 0")
    _expect(batch_size >= 1, "pool.base.batch_size", "must be >= 1")
    _expect(algorithm in ("fedavg", "fedsgd"), "pool.base.algorithm", "must be 'fedavg' or 'fedsgd'")
    strict = _get(pool, "pool", "strict_paper_weights", bool, default=False)

    rash = _get(raw, "", "rashomon", dict, default={})
    eps_grid = tuple(_get(rash, "rashomon", "epsilon_grid", list, default=list(DEFAULT_EPSILON_GRID)))
    _expect(
        all(isinstance(e, (int, float)) and e >= 0 for e in eps_grid) and bool(eps_grid),
        "rashomon.epsilon_grid",
        "must be non-empty nonnegative numbers",
    )
    _expect(list(eps_grid) == sorted(eps_grid), "rashomon.epsilon_grid", "must be sorted ascending")
    t_grid = tuple(_get(rash, "rashomon", "t_grid", list, default=list(DEFAULT_T_GRID)))
    _expect(all(0 < t <= 1 for t in t_grid), "rashomon.t_grid", "entries must be in (0, 1]")
    definitions = tuple(_get(rash, "rashomon", "definitions", list, default=list(DEFAULT_DEFINITIONS)))
    for d in definitions:
        _expect(d in DEFAULT_DEFINITIONS, "rashomon.definitions", f"unknown definition {d!r}")
    eval_clients = _get(rash, "rashomon", "eval_clients", None, default="all")
    if eval_clients == "all":
        eval_clients = None
    else:
        _expect(
            isinstance(eval_clients, list) and all(isinstance(c, int) for c in eval_clients),
            "rashomon.eval_clients",
            "must be 'all' or a list of client ids",
        )
        eval_clients = tuple(eval_clients)
    individual = _get(rash, "rashomon", "individual_clients", None, default="all")
    if isinstance(individual, list):
        _expect(all(isinstance(c, int) for c in individual), "rashomon.individual_clients",
                "list entries must be client ids")
        individual = tuple(individual)
    elif individual != "all":
        _expect(isinstance(individual, int) and individual >= 1, "rashomon.individual_clients",
                "must be 'all', a list of ids, or a positive sample count")
    weighted = _get(rash, "rashomon", "weighted_aggregation", bool, default=True)

    met = _get(raw, "", "metrics", dict, default={})
    metric_list = tuple(_get(met, "metrics", "metrics", list, default=list(ALL_METRICS)))
    for m in metric_list:
        _expect(m in ALL_METRICS, "metrics.metrics", f"unknown metric {m!r}")
    path = _get(met, "metrics", "path", str, default="trusted")
    _expect(path in ("trusted", "dp"), "metrics.path", "must be 'trusted' or 'dp'")
    dp_epsilon = _get(met, "metrics", "dp_epsilon", float, default=0.1)
    _expect(dp_epsilon > 0, "metrics.dp_epsilon", "must be > 0")
    n_buckets = _get(met, "metrics", "n_buckets", int, default=1000)
    _expect(n_buckets >= 1, "metrics.n_buckets", "must be >= 1")
    percentiles = tuple(_get(met, "metrics", "percentiles", list, default=list(DEFAULT_PERCENTILES)))
    _expect(
        all(isinstance(p, (int, float)) and 0 <= p <= 100 for p in percentiles) and bool(percentiles),
        "metrics.percentiles",
        "must be numbers in [0, 100]",
    )
    tau = _get(met, "metrics", "tau", float, default=0.5)
    _expect(0 < tau < 1, "metrics.tau", "must be in (0, 1)")
    emit_exp = _get(met, "metrics", "emit_exponentiated_rc", bool, default=False)
    rc_tolerance = _get(met, "metrics", "rc_tolerance", float, default=1e-5)
    _expect(rc_tolerance > 0, "metrics.rc_tolerance", "must be > 0")
    rc_max_iters = _get(met, "metrics", "rc_max_iters", int, default=20000)
    _expect(rc_max_iters >= 1, "metrics.rc_max_iters", "must be >= 1")

    fairness = raw.get("fairness")
    fairness_sample_k = None
    if fairness is not None:
        _expect(isinstance(fairness, dict), "fairness", "must be an object")
        fairness_sample_k = _get(fairness, "fairness", "sample_k", int, default=15)
        _expect(fairness_sample_k >= 1, "fairness.sample_k", "must be >= 1")

    return ExperimentConfig(
        master_seed=master_seed,
        output_dir=output_dir,
        source=source,
        synthetic=synthetic,
        csv=csv_section,
        n_clients=n_clients,
        alpha=alpha,
        split_fractions=tuple(float(f) for f in fractions),
        arch=arch,
        d_hidden=d_hidden,
        grid_seeds=seeds,
        grid_ratios=tuple(float(r) for r in ratios),
        grid_epochs=epochs,
        rounds=rounds,
        lr=lr,
        batch_size=batch_size,
        algorithm=algorithm,
        strict_paper_weights=strict,
        epsilon_grid=tuple(float(e) for e in eps_grid),
        t_grid=tuple(float(t) for t in t_grid),
        definitions=definitions,
        eval_clients=eval_clients,
        individual_clients=individual,
        weighted_aggregation=weighted,
        metrics=metric_list,
        path=path,
        dp_epsilon=dp_epsilon,
        n_buckets=n_buckets,
        percentiles=tuple(float(p) for p in percentiles),
        tau=tau,
        emit_exponentiated_rc=emit_exp,
        rc_tolerance=rc_tolerance,
        rc_max_iters=rc_max_iters,
        fairness_sample_k=fairness_sample_k,
        raw=raw,
    )
