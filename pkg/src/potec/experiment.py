"""Seeded synthetic sweeps, bootstrap summaries and CSV output."""
from __future__ import annotations

import csv
import logging
import math
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bandit_env import (
    EnvConfig,
    build_synthetic_env,
    make_noisy_regression_model,
    perturb_clusters,
    restrict_support,
    sample_logged_data,
)
from .errors import ConfigurationError
from .trainer import BASELINES, TrainConfig, ValueEvaluator, run_baseline, run_potec, tune_baseline

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("n", "n_actions", "n_clusters", "beta", "cluster_noise", "n_unsupported", "sigma_c", "sigma_a")
METHODS = ("potec",) + BASELINES
RESULT_FIELDS = ["method", "param", "value", "seed", "normalized_value", "raw_value", "logging_value",
                 "tuning", "status", "error"]
SUMMARY_FIELDS = ["method", "param", "value", "n_seeds", "mean", "ci_low", "ci_high", "tuning"]


@dataclass(frozen=True)
class SweepSpec:
    """One swept axis; the other axes take their base values.

    ``sigma_c``/``sigma_a`` set to a number replace every learned reward model
    with the frozen noisy model ``q + eps_c + eps_a``; ``None`` means learned.
    """

    param: str = "n"
    values: tuple = (4000,)
    methods: tuple = ("potec", "reg_based", "ips", "dr")
    n_seeds: int = 1
    master_seed: int = 0
    env: EnvConfig = field(default_factory=lambda: EnvConfig(reward_offset=10.0))
    train: TrainConfig = field(default_factory=TrainConfig)
    n: int = 4000
    repeats_per_context: int = 2
    cluster_noise: float = 0.0
    n_unsupported: int = 0
    sigma_c: Optional[float] = None
    sigma_a: Optional[float] = None
    n_test: int = 10_000
    tune_baselines: bool = True

    def validate(self) -> None:
        if self.param not in SWEEP_PARAMS:
            raise ConfigurationError(f"unknown sweep parameter {self.param!r}; expected one of {SWEEP_PARAMS}")
        if not self.values or not self.methods:
            raise ConfigurationError("values and methods must be nonempty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigurationError(f"unknown methods {unknown}; expected from {METHODS}")
        if self.n_seeds < 1 or self.n_test < 1:
            raise ConfigurationError("n_seeds and n_test must be >= 1")
        self.env.validate()
        self.train.validate()

    def setting(self, value) -> dict:
        """All axis values for one swept value."""
        s = {
            "n": self.n, "n_actions": self.env.n_actions, "n_clusters": self.env.n_clusters,
            "beta": self.env.beta, "cluster_noise": self.cluster_noise, "n_unsupported": self.n_unsupported,
            "sigma_c": self.sigma_c, "sigma_a": self.sigma_a,
        }
        s[self.param] = value
        return s


@dataclass(frozen=True)
class ResultRow:
    method: str
    param: str
    value: object
    seed: int
    normalized_value: float
    raw_value: float
    logging_value: float
    tuning: str
    status: str = "ok"
    error: str = ""

    def as_list(self) -> list:
        return [self.method, self.param, _fmt(self.value), self.seed, _fmt(self.normalized_value),
                _fmt(self.raw_value), _fmt(self.logging_value), self.tuning, self.status, self.error]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _value_key(value) -> int:
    return zlib.crc32(repr(value).encode())


def cell_seeds(master: int, seed: int, value) -> dict:
    """Seeds for one (value, seed) cell; env and test set do not depend on the value."""
    return {
        "env": [master, seed, 0],
        "support": [master, seed, 1],
        "clusters": [master, seed, 2, _value_key(value)],
        "data": [master, seed, 3, _value_key(value)],
        "test": [master, seed, 4],
        "noise": [master, seed, 5, _value_key(value)],
        "train": int(np.random.default_rng([master, seed, 6]).integers(2**31)),
    }


def run_cell(spec: SweepSpec, value, seed: int) -> list[ResultRow]:
    """Build env, sample data, run every method, evaluate on fresh test contexts."""
    s = spec.setting(value)
    seeds = cell_seeds(spec.master_seed, seed, value)
    tuning = "oracle-tuned" if spec.tune_baselines else "fixed"
    rows = []
    try:
        env_cfg = replace(spec.env, n_actions=int(s["n_actions"]), n_clusters=int(s["n_clusters"]),
                          beta=float(s["beta"]))
        env = build_synthetic_env(env_cfg, seeds["env"])
        env = restrict_support(env, int(s["n_unsupported"]), seeds["support"])
        D = sample_logged_data(env, int(s["n"]), seeds["data"], spec.repeats_per_context)
        test = env.sample_contexts(spec.n_test, np.random.default_rng(seeds["test"]))
        evaluate = ValueEvaluator(env, test)
        v0 = float((env.logging_probs(test) * evaluate.q).sum(axis=1).mean())
        if not v0 > 0:
            raise ConfigurationError(f"logging policy value {v0:.4g} is not positive; raise env.reward_offset")
        cm = env.cluster_map
        if s["cluster_noise"]:
            cm = perturb_clusters(cm, float(s["cluster_noise"]), seeds["clusters"])
        model = None
        if s["sigma_c"] is not None or s["sigma_a"] is not None:
            model = make_noisy_regression_model(env, float(s["sigma_c"] or 0.0), float(s["sigma_a"] or 0.0),
                                                seeds["noise"])
        train = replace(spec.train, seed=seeds["train"])
    except Exception as exc:  # a broken cell is reported per method, the sweep goes on
        err = f"{type(exc).__name__}: {exc}"
        return [ResultRow(m, spec.param, value, seed, math.nan, math.nan, math.nan, tuning, "failed", err)
                for m in spec.methods]
    for method in spec.methods:
        try:
            if method == "potec":
                pol, curve, _ = run_potec(D, cm, env, train, f_override=model, evaluate=evaluate)
                label = "fixed"
            elif spec.tune_baselines:
                pol, curve, _ = tune_baseline(method, D, train, evaluate, logging=env, q_hat=model)
                label = tuning
            else:
                pol, curve = run_baseline(method, D, train, logging=env, q_hat=model, evaluate=evaluate)
                label = tuning
            raw = evaluate(pol)
            if not math.isfinite(raw):
                raise FloatingPointError("non-finite policy value")
            rows.append(ResultRow(method, spec.param, value, seed, raw / v0, raw, v0, label))
        except Exception as exc:
            log.error("cell (%s, %s, %s) failed:\n%s", value, seed, method, traceback.format_exc())
            rows.append(ResultRow(method, spec.param, value, seed, math.nan, math.nan, v0, tuning,
                                  "failed", f"{type(exc).__name__}: {exc}"))
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(spec: SweepSpec, out_dir=None, jobs: int = 1) -> list[ResultRow]:
    """Every (value, seed) cell, optionally in a process pool; rows come back in spec order."""
    spec.validate()
    cells = [(spec, v, s) for v in spec.values for s in range(spec.n_seeds)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, cells))
    else:
        results = [run_cell(*c) for c in cells]
    rows = [r for cell in results for r in cell]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(rows, out / "results.csv")
        write_summary(summarize(rows), out / "summary.csv")
    return rows


def write_rows(rows: list[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow(r.as_list())


def read_rows(path) -> list[ResultRow]:
    out = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            out.append(ResultRow(
                d["method"], d["param"], _parse_value(d["value"]), int(d["seed"]),
                float(d["normalized_value"]), float(d["raw_value"]), float(d["logging_value"]),
                d["tuning"], d["status"], d["error"],
            ))
    return out


def _parse_value(s: str):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return None if s == "None" else s


def bootstrap_mean_ci(x, confidence: float = 0.95, n_resamples: int = 10_000, seed=0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, len(x), (n_resamples, len(x)))].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def summarize(rows: list[ResultRow], confidence: float = 0.95, n_resamples: int = 10_000, seed=0) -> list[dict]:
    """Mean normalized value and bootstrap CI per (method, value); failed rows are skipped."""
    groups: dict = {}
    order = []
    for r in rows:
        key = (r.method, r.param, r.value)
        if key not in groups:
            groups[key] = []
            order.append(key)
        if r.status == "ok":
            groups[key].append(r)
    out = []
    for key in order:
        g = groups[key]
        if not g:
            continue
        x = np.array([r.normalized_value for r in g])
        lo, hi = bootstrap_mean_ci(x, confidence, n_resamples, [seed, _value_key(key)])
        out.append({"method": key[0], "param": key[1], "value": key[2], "n_seeds": len(g),
                    "mean": float(x.mean()), "ci_low": lo, "ci_high": hi, "tuning": g[0].tuning})
    return out


def write_summary(summary: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for s in summary:
            w.writerow([_fmt(s[k]) for k in SUMMARY_FIELDS])


# --- config documents ------------------------------------------------------------

def spec_from_document(doc: dict) -> SweepSpec:
    """Build a spec from a parsed config with sections env/sweep/methods/train."""
    sweep = dict(doc.get("sweep", {}))
    env = EnvConfig.from_dict(doc.get("env", {})) if "env" in doc else SweepSpec().env
    train_doc = dict(doc.get("train", {}))
    if "train.regression" in doc:
        # unparsed documents keep the dotted table name as a flat key
        train_doc["regression"] = doc["train.regression"]
    train = TrainConfig.from_dict(train_doc)
    methods = doc.get("methods", {}).get("list", list(SweepSpec.methods))
    for k in ("sigma_c", "sigma_a"):
        if sweep.get(k) == "none":
            sweep[k] = None
    if "values" in sweep:
        sweep["values"] = tuple(sweep["values"])
    spec = SweepSpec(env=env, train=train, methods=tuple(methods), **sweep)
    spec.validate()
    return spec


def spec_to_document(spec: SweepSpec) -> dict:
    sweep = {k: getattr(spec, k) for k in ("param", "values", "n_seeds", "master_seed", "n", "repeats_per_context",
                                           "cluster_noise", "n_unsupported", "sigma_c", "sigma_a", "n_test",
                                           "tune_baselines")}
    sweep["values"] = list(sweep["values"])
    for k in ("sigma_c", "sigma_a"):
        if sweep[k] is None:
            sweep[k] = "none"
    train = spec.train.to_dict()
    regression = train.pop("regression")
    # emitted as a [train.regression] table
    return {"env": spec.env.to_dict(), "sweep": sweep, "methods": {"list": list(spec.methods)},
            "train": train, "train.regression": regression}
