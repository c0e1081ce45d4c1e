"""Experiment harness: configuration, metrics and CSV output.

Config documents are flat JSON objects (schema version 1). ``M``, ``N`` and
``H`` are required; every other key has a default (see ``ExperimentConfig``).

Each run writes ``trial_<k>.csv`` (one row per method per iteration),
``aggregate.csv`` (per-iteration means across trials) and ``summary.csv``
(bits needed to reach the accuracy target).
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import QADMM, AsyncOracle, FullOracle
from .numkit import RngStream, derive_seed
from .problems import (
    L1Regularizer,
    ReferenceSolverError,
    SyntheticLassoSpec,
    SyntheticLogisticSpec,
    ZeroRegularizer,
    consensus_objective,
    generate_lasso,
    generate_logistic,
    reference_optimum,
    smooth_reference_optimum,
)
from .quantize import CompressorConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("qadmm", "baseline")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, location: str = "<config>"):
        where = f"{location}: {key}" if key else location
        super().__init__(f"{where}: {message}")
        self.key = key
        self.location = location


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _probability(v):
    return 0.0 <= v <= 1.0


# name -> (type, default, check, description); default None marks a required key
_SCHEMA = {
    "version": (int, SCHEMA_VERSION, lambda v: v == SCHEMA_VERSION, "schema version"),
    "problem": (str, "lasso", lambda v: v in ("lasso", "logistic"), "'lasso' or 'logistic'"),
    "M": (int, None, lambda v: v >= 1, ">= 1"),
    "N": (int, None, lambda v: v >= 1, ">= 1"),
    "H": (int, None, lambda v: v >= 1, ">= 1"),
    "sparsity": (float, 0.2, _probability, "in [0, 1]"),
    "noise_std": (float, 0.1, _non_negative, ">= 0"),
    "rho": (float, 500.0, _positive, "> 0"),
    "theta": (float, 0.1, _non_negative, ">= 0"),
    "mu": (float, 1.0, _non_negative, ">= 0"),
    "steps": (int, 10, lambda v: v >= 1, ">= 1"),
    "eta": (float, 0.05, _positive, "> 0"),
    "compressor": (str, "stochastic", lambda v: v in ("stochastic", "identity"), "'stochastic' or 'identity'"),
    "q": (int, 3, lambda v: 2 <= v <= 32, "in [2, 32] so that S = 2^(q-1) - 1 >= 1"),
    "full_precision_bits": (int, 32, lambda v: v >= 1, ">= 1"),
    "tau": (int, 1, lambda v: v >= 1, ">= 1"),
    "P": (int, 1, lambda v: v >= 1, ">= 1"),
    "oracle": (str, "fixed-split", lambda v: v in ("fixed-split", "per-call-bernoulli", "full"),
               "'fixed-split', 'per-call-bernoulli' or 'full'"),
    "p_slow": (float, 0.1, _probability, "in [0, 1]"),
    "p_fast": (float, 0.8, _probability, "in [0, 1]"),
    "max_iters": (int, 200, lambda v: v >= 1, ">= 1"),
    "accuracy_target": (float, 1e-10, _positive, "> 0"),
    "stop_at_target": (bool, False, lambda v: True, "boolean"),
    "trials": (int, 10, lambda v: v >= 1, ">= 1"),
    "seed": (int, 0, _non_negative, ">= 0"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    M: int
    N: int
    H: int
    version: int = SCHEMA_VERSION
    problem: str = "lasso"
    sparsity: float = 0.2
    noise_std: float = 0.1
    rho: float = 500.0
    theta: float = 0.1
    mu: float = 1.0
    steps: int = 10
    eta: float = 0.05
    compressor: str = "stochastic"
    q: int = 3
    full_precision_bits: int = 32
    tau: int = 1
    P: int = 1
    oracle: str = "fixed-split"
    p_slow: float = 0.1
    p_fast: float = 0.8
    max_iters: int = 200
    accuracy_target: float = 1e-10
    stop_at_target: bool = False
    trials: int = 10
    seed: int = 0

    def compressor_config(self) -> CompressorConfig:
        return CompressorConfig(kind=self.compressor, q=self.q, full_precision_bits=self.full_precision_bits)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _SCHEMA}

    def replace(self, **changes) -> "ExperimentConfig":
        return config_from_dict({**self.to_dict(), **changes})


def config_from_dict(doc: dict, location: str = "<config>") -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a key/value object", location=location)
    unknown = sorted(set(doc) - set(_SCHEMA))
    if unknown:
        raise ConfigError("unknown key", key=unknown[0], location=location)
    values = {}
    for name, (typ, default, check, desc) in _SCHEMA.items():
        if name not in doc:
            if default is None:
                raise ConfigError("missing required key", key=name, location=location)
            values[name] = default
            continue
        v = doc[name]
        if typ is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if typ is not bool and isinstance(v, bool) or not isinstance(v, typ):
            raise ConfigError(f"expected {typ.__name__}, got {v!r}", key=name, location=location)
        if typ is float and not math.isfinite(v):
            raise ConfigError(f"must be finite, got {v!r}", key=name, location=location)
        if not check(v):
            raise ConfigError(f"value {v!r} out of range ({desc})", key=name, location=location)
        values[name] = v
    if values["P"] > values["N"]:
        raise ConfigError(f"P={values['P']} exceeds N={values['N']}", key="P", location=location)
    return ExperimentConfig(**values)


def parse_config(text: str, location: str = "<config>") -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed document: {exc.msg} (line {exc.lineno}, column {exc.colno})",
                          location=location) from None
    return config_from_dict(doc, location)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"


@dataclass
class MetricsRow:
    trial: int
    method: str
    iteration: int
    active_count: int
    lagrangian: float
    accuracy: float
    objective: float
    objective_accuracy: float
    uplink_bits: int
    downlink_bits: int
    normalized_bits: float


ROW_FIELDS = [f.name for f in dataclasses.fields(MetricsRow)]


def accuracy(lagrangian: float, F_star: float) -> float:
    """Relative gap ``|L - F*| / F*``."""
    if not F_star > 0:
        raise ValueError(f"accuracy needs a positive optimal value, got {F_star}")
    return abs(lagrangian - F_star) / F_star


def evaluate_lagrangian(locals_, regularizer, xs, us, z, rho: float) -> float:
    """Scaled-form augmented Lagrangian ``sum f_i(x_i) + h(z) + rho/2 sum ||x_i - z + u_i||^2``."""
    total = sum(p.value(x) for p, x in zip(locals_, xs)) + regularizer.value(z)
    penalty = 0.0
    for x, u in zip(xs, us):
        d = x - z + u
        penalty += float(d @ d)
    return total + 0.5 * rho * penalty


def build_problem(cfg: ExperimentConfig, trial: int):
    """Data, regularizer and reference optimum for one trial."""
    tseed = derive_seed(cfg.seed, "trial", trial)
    if cfg.problem == "lasso":
        spec = SyntheticLassoSpec(M=cfg.M, N=cfg.N, H=cfg.H, sparsity=cfg.sparsity,
                                  noise_std=cfg.noise_std, seed=tseed)
        locals_, _ = generate_lasso(spec)
        ref = reference_optimum(locals_, cfg.theta)
        return locals_, L1Regularizer(cfg.theta), ref
    spec = SyntheticLogisticSpec(M=cfg.M, N=cfg.N, H=cfg.H, mu=cfg.mu, steps=cfg.steps, eta=cfg.eta, seed=tseed)
    locals_ = generate_logistic(spec)
    return locals_, ZeroRegularizer(), smooth_reference_optimum(locals_)


def make_system(cfg: ExperimentConfig, locals_, regularizer, trial: int, compressor: CompressorConfig) -> QADMM:
    tseed = derive_seed(cfg.seed, "trial", trial)
    if cfg.oracle == "full":
        oracle = FullOracle(cfg.N)
    else:
        oracle = AsyncOracle(cfg.N, RngStream(tseed, "oracle"), mode=cfg.oracle, p_slow=cfg.p_slow, p_fast=cfg.p_fast)
    return QADMM(locals_, regularizer, rho=cfg.rho, compressor=compressor, tau=cfg.tau, P=cfg.P,
                 oracle=oracle, rng=RngStream(tseed, "channels"))


def run_trial(cfg: ExperimentConfig, trial: int, problem=None) -> list[MetricsRow]:
    locals_, regularizer, ref = problem if problem is not None else build_problem(cfg, trial)
    F_star = ref.F_star
    rows = []
    baseline = CompressorConfig(kind="identity", full_precision_bits=cfg.full_precision_bits)
    for method, comp in (("qadmm", cfg.compressor_config()), ("baseline", baseline)):
        system = make_system(cfg, locals_, regularizer, trial, comp)
        for _ in range(cfg.max_iters):
            info = system.run_round()
            lag = evaluate_lagrangian(locals_, regularizer, system.xs, system.us, system.z, cfg.rho)
            obj = consensus_objective(locals_, regularizer, system.z)
            row = MetricsRow(
                trial=trial, method=method, iteration=info.iteration, active_count=len(info.active),
                lagrangian=lag, accuracy=accuracy(lag, F_star), objective=obj,
                objective_accuracy=accuracy(obj, F_star), uplink_bits=info.uplink_bits,
                downlink_bits=info.downlink_bits,
                normalized_bits=(info.uplink_bits + info.downlink_bits) / cfg.M,
            )
            rows.append(row)
            if cfg.stop_at_target and min(row.accuracy, row.objective_accuracy) <= cfg.accuracy_target:
                break
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) if isinstance(row, dict) else _fmt(getattr(row, f)) for f in fields])


AGGREGATE_FIELDS = ["method", "iteration", "trials", "mean_accuracy", "mean_objective_accuracy",
                    "mean_normalized_bits"]
SUMMARY_FIELDS = ["method", "metric", "target", "iteration_to_target", "bits_to_target",
                  "trials_reaching_target", "reduction_vs_baseline"]


def aggregate(rows: list[MetricsRow]) -> list[dict]:
    """Per-method, per-iteration means of the per-trial values."""
    groups: dict[tuple[str, int], list[MetricsRow]] = {}
    for row in rows:
        groups.setdefault((row.method, row.iteration), []).append(row)
    out = []
    for method in METHODS:
        iters = sorted(it for m, it in groups if m == method)
        for it in iters:
            g = groups[(method, it)]
            out.append({
                "method": method,
                "iteration": it,
                "trials": len(g),
                "mean_accuracy": float(np.mean([r.accuracy for r in g])),
                "mean_objective_accuracy": float(np.mean([r.objective_accuracy for r in g])),
                "mean_normalized_bits": float(np.mean([r.normalized_bits for r in g])),
            })
    return out


def first_hit(agg: list[dict], method: str, column: str, target: float):
    for rec in agg:
        if rec["method"] == method and rec[column] <= target:
            return rec
    return None


def summarize(rows: list[MetricsRow], agg: list[dict], target: float) -> list[dict]:
    out = []
    for metric, column in (("lagrangian", "mean_accuracy"), ("objective", "mean_objective_accuracy")):
        row_attr = "accuracy" if metric == "lagrangian" else "objective_accuracy"
        hits = {m: first_hit(agg, m, column, target) for m in METHODS}
        for method in METHODS:
            hit = hits[method]
            reaching = {r.trial for r in rows if r.method == method and getattr(r, row_attr) <= target}
            reduction = ""
            if method == "qadmm" and hit is not None and hits["baseline"] is not None:
                reduction = 1.0 - hit["mean_normalized_bits"] / hits["baseline"]["mean_normalized_bits"]
            out.append({
                "method": method,
                "metric": metric,
                "target": target,
                "iteration_to_target": hit["iteration"] if hit else "",
                "bits_to_target": hit["mean_normalized_bits"] if hit else "",
                "trials_reaching_target": len(reaching),
                "reduction_vs_baseline": reduction,
            })
    return out


@dataclass
class ExperimentResult:
    rows: list[MetricsRow]
    aggregate: list[dict]
    summary: list[dict]
    failed_trials: list[int]


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run every trial for QADMM and the full-precision baseline; optionally write CSVs."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], []
    for trial in range(cfg.trials):
        try:
            trial_rows = run_trial(cfg, trial)
        except ReferenceSolverError as exc:
            log.error("trial %d aborted: %s (best value %r)", trial, exc, exc.best_value)
            failed.append(trial)
            if out is not None:
                diag = MetricsRow(trial, "reference-failed", 0, 0, math.nan, math.nan, exc.best_value,
                                  math.nan, 0, 0, 0.0)
                write_rows(out / f"trial_{trial}.csv", ROW_FIELDS, [diag])
            continue
        log.info("trial %d: %d rows", trial, len(trial_rows))
        if out is not None:
            write_rows(out / f"trial_{trial}.csv", ROW_FIELDS, trial_rows)
        rows.extend(trial_rows)
    agg = aggregate(rows)
    summary = summarize(rows, agg, cfg.accuracy_target)
    if out is not None:
        write_rows(out / "aggregate.csv", AGGREGATE_FIELDS, agg)
        write_rows(out / "summary.csv", SUMMARY_FIELDS, summary)
    return ExperimentResult(rows, agg, summary, failed)
