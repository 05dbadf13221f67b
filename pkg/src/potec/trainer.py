"""Minibatch Adam ascent for every method, the full POTEC pipeline and baselines."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .bandit_env import ClusterMap, LoggedDataset
from .errors import ConfigurationError, FallbackNeeded
from .func_approx import AdamConfig, AdamState, adam_step
from .grad_estimators import (
    ActionSelector,
    dr_upstream,
    ips_upstream,
    logged_cluster_propensities,
    potec_one_stage_upstream,
    potec_upstream,
    sips_upstream,
)
from .policy import OverallPolicy, RegressionPolicy, SecondStagePolicy, SoftmaxPolicy, cluster_marginal
from .reward_models import (
    CombinedRegressor,
    RegressionConfig,
    build_pair_dataset,
    fit_baseline,
    fit_conventional,
    fit_pairwise,
    local_correctness_residual,
)

log = logging.getLogger(__name__)

ACTION_ESTIMATORS = ("ips", "dr", "sips", "potec1")
BASELINES = ("reg_based", "ips", "dr", "sips", "potec1")


@dataclass(frozen=True)
class TrainConfig:
    estimator: str = "potec"
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    policy_hidden: tuple = (100, 100, 100)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    sips_fraction: float = 1.0
    temperature: float = 1.0
    eval_every: int = 1
    pair_threshold_factor: int = 10
    # baseline search grids
    weight_decay_grid: tuple = (1e-2, 1e-4, 1e-6)
    learning_rate_grid: tuple = (1e-3, 5e-4, 1e-4)
    batch_size_grid: tuple = (64, 128, 256)
    fraction_grid: tuple = (0.1, 0.5, 1.0)
    temperature_grid: tuple = (1e-3, 1e-2, 1e-1, 1.0)

    def validate(self) -> None:
        if self.estimator not in ("potec",) + ACTION_ESTIMATORS:
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate and weight decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigurationError("batch_size and eval_every must be positive, epochs nonnegative")
        if not 0 < self.sips_fraction <= 1 or not self.temperature > 0:
            raise ConfigurationError("sips_fraction must be in (0, 1] and temperature positive")
        for name in ("weight_decay_grid", "learning_rate_grid", "batch_size_grid", "fraction_grid",
                     "temperature_grid"):
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"{name} is empty")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "regression" in d:
            reg = dict(d["regression"])
            if "hidden" in reg:
                reg["hidden"] = tuple(reg["hidden"])
            d["regression"] = RegressionConfig(**reg)
        for k in ("policy_hidden", "weight_decay_grid", "learning_rate_grid", "batch_size_grid",
                  "fraction_grid", "temperature_grid"):
            if k in d:
                d[k] = tuple(d[k])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, RegressionConfig):
                v = {kk: list(vv) if isinstance(vv, tuple) else vv for kk, vv in v.__dict__.items()}
            elif isinstance(v, tuple):
                v = list(v)
            out[k] = v
        return out


@dataclass
class LearningCurve:
    epochs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)

    def append(self, epoch: int, value: float, grad_norm: float) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise ConfigurationError("learning-curve epochs must increase")
        self.epochs.append(int(epoch))
        self.values.append(float(value))
        self.grad_norms.append(float(grad_norm))

    @property
    def final_value(self) -> float:
        return self.values[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "value", "grad_norm"])
            for e, v, g in zip(self.epochs, self.values, self.grad_norms):
                w.writerow([e, repr(v), repr(g)])


class ValueEvaluator:
    """Exact policy value on a fixed context set, with q and second-stage choices cached."""

    def __init__(self, env, contexts, weights=None):
        self.contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
        self.q = env.q(self.contexts)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self._choices: dict = {}

    def _reduce(self, per_context: np.ndarray) -> float:
        if self.weights is None:
            return float(per_context.mean())
        return float(self.weights @ per_context)

    def __call__(self, policy) -> float:
        X = self.contexts
        if isinstance(policy, OverallPolicy) and isinstance(policy.second, SecondStagePolicy):
            key = id(policy.second)
            if key not in self._choices:
                self._choices[key] = (policy.second, policy.second.choices(X))
            ch = self._choices[key][1]
            pi1 = policy.first.probs(X)
            return self._reduce((pi1 * np.take_along_axis(self.q, ch, axis=1)).sum(axis=1))
        pi = policy.probs(X)
        if pi.shape != self.q.shape:
            raise ConfigurationError(f"policy returned shape {pi.shape}, expected {self.q.shape}")
        return self._reduce((pi * self.q).sum(axis=1))


@dataclass(frozen=True, eq=False)
class EstimatorInputs:
    """What an estimator needs besides the policy and the logged records.

    ``logging_probs`` is the (n, A) logging simplex on the logged contexts or
    the (n,) logged cluster propensities; POTEC variants need one of them.
    """

    regressor: object = None
    second: Optional[SecondStagePolicy] = None
    selector: Optional[ActionSelector] = None
    cluster_map: Optional[ClusterMap] = None
    logging_probs: Optional[np.ndarray] = None


def _check_pairing(p, estimator: str) -> None:
    clusters = isinstance(p, SoftmaxPolicy) and p.outcome_space == "clusters"
    if estimator == "potec" and not clusters:
        raise ConfigurationError("the potec estimator trains a first-stage policy over clusters")
    if estimator != "potec" and clusters:
        raise ConfigurationError(f"a cluster policy cannot be trained with {estimator}")
    if estimator == "potec1" and not isinstance(p, SoftmaxPolicy):
        raise ConfigurationError("potec1 needs a softmax policy over actions")


class _UpstreamBuilder:
    """Caches every frozen per-record quantity, then builds V for a minibatch."""

    def __init__(self, p, D: LoggedDataset, est: str, inputs: EstimatorInputs):
        self.D, self.est = D, est
        X = D.contexts
        cm = inputs.cluster_map or D.cluster_map
        self.cm = cm
        self.n_out = p.n_outcomes if isinstance(p, SoftmaxPolicy) else p.n_actions
        if est in ("dr", "potec", "potec1"):
            if inputs.regressor is None:
                raise ConfigurationError(f"{est} needs a regressor")
            self.F = np.atleast_2d(inputs.regressor.predict(X))
        if est == "sips":
            sel = inputs.selector
            if sel is None:
                raise ConfigurationError("sips needs an action selector")
            mask = sel.mask(X)
            self.mask = np.ones((len(D), self.n_out), dtype=bool) if mask is None else mask
        if est in ("potec", "potec1"):
            if inputs.logging_probs is None:
                raise ConfigurationError(f"{est} needs logging probabilities")
            self.clusters = cm.assignment[D.actions]
            self.pc = logged_cluster_propensities(inputs.logging_probs, D.actions, cm)
        if est == "potec":
            if inputs.second is None:
                raise ConfigurationError("potec needs a second-stage policy")
            rows = np.arange(len(D))
            self.f_logged = self.F[rows, D.actions]
            self.f_cluster = inputs.second.cluster_expectation(X, self.F)

    def __call__(self, p, idx) -> np.ndarray:
        D, est = self.D, self.est
        a, r, pr = D.actions[idx], D.rewards[idx], D.propensities[idx]
        if est == "ips":
            return ips_upstream(a, r, pr, self.n_out)
        if est == "dr":
            return dr_upstream(a, r, pr, self.F[idx])
        if est == "sips":
            return sips_upstream(a, r, pr, p.probs(D.contexts[idx]), self.mask[idx])
        if est == "potec":
            return potec_upstream(self.clusters[idx], r, self.pc[idx], self.f_logged[idx], self.f_cluster[idx])
        pi = p.probs(D.contexts[idx])
        return potec_one_stage_upstream(a, self.clusters[idx], r, self.pc[idx], pi,
                                        cluster_marginal(pi, self.cm), self.F[idx])

    def gradient(self, p, idx) -> np.ndarray:
        return p.prob_gradient(self.D.contexts[idx], self(p, idx)) / len(idx)


def train_policy(p, D: LoggedDataset, cfg: TrainConfig, inputs: EstimatorInputs = EstimatorInputs(),
                 evaluate: Optional[Callable] = None):
    """Ascend the estimated gradient; returns (trained policy, LearningCurve).

    ``evaluate(policy) -> float`` gives the exact value for the curve; cluster
    policies are passed to it wrapped with ``inputs.second``. Without it the
    curve holds nan values.
    """
    cfg.validate()
    _check_pairing(p, cfg.estimator)
    if len(D) == 0:
        raise ConfigurationError("empty logged dataset")
    build = _UpstreamBuilder(p, D, cfg.estimator, inputs)
    wrap = (lambda q: OverallPolicy(q, inputs.second)) if cfg.estimator == "potec" else (lambda q: q)
    everything = np.arange(len(D))
    curve = LearningCurve()

    def record(epoch, pol):
        value = evaluate(wrap(pol)) if evaluate is not None else math.nan
        curve.append(epoch, value, float(np.linalg.norm(build.gradient(pol, everything))))

    hyper = AdamConfig(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    state = AdamState.zeros(p.n_params)
    params = p.first.params if isinstance(p, OverallPolicy) else p.params
    record(0, p)
    for epoch in range(1, cfg.epochs + 1):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(D))
        for start in range(0, len(D), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            grad = build.gradient(p, idx)
            params, state = adam_step(params, -grad, state, hyper)
            p = p.with_params(params)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record(epoch, p)
    return p, curve


def _logging_for(logging, X) -> np.ndarray:
    return logging.logging_probs(X) if hasattr(logging, "logging_probs") else np.asarray(logging, dtype=float)


def pair_threshold(cfg: TrainConfig) -> int:
    """Minimum pair count: factor x (parameters of one output head of h)."""
    width = cfg.regression.hidden[-1] if cfg.regression.hidden else None
    return cfg.pair_threshold_factor * ((width if width is not None else 0) + 1)


def run_potec(D: LoggedDataset, cm: ClusterMap, logging, cfg: TrainConfig = TrainConfig(), f_override=None,
              evaluate: Optional[Callable] = None, probe_env=None, probe_contexts=None):
    """Pairwise regression, baseline regression, then first-stage ascent.

    ``logging`` is an environment (logging simplex recomputed) or the stored
    logging probabilities for ``D``. ``f_override`` skips both fits and uses
    the given model as f and as the second-stage scorer.
    Returns (OverallPolicy, LearningCurve, diagnostics).
    """
    if len(D) == 0:
        raise ConfigurationError("empty logged dataset")
    cfg = replace(cfg, estimator="potec")
    D = D.with_cluster_map(cm)
    diag: dict = {"fallback": False, "n_pairs": 0, "injected": f_override is not None}
    if f_override is not None:
        h = f = f_override
    else:
        pairs = build_pair_dataset(D, cm)
        diag["n_pairs"] = len(pairs)
        try:
            if len(pairs) < pair_threshold(cfg):
                raise FallbackNeeded(f"{len(pairs)} pairs < {pair_threshold(cfg)}")
            h = fit_pairwise(pairs, cfg.regression, cm.n_actions)
            f = CombinedRegressor(fit_baseline(D, h, cfg.regression, cm), h)
        except FallbackNeeded as exc:
            log.warning("pairwise regression infeasible (%s); using conventional regression", exc)
            diag["fallback"] = True
            h = f = fit_conventional(D, cfg.regression, cm.n_actions)
    second = SecondStagePolicy(h, cm)
    first = SoftmaxPolicy.init(D.context_dim, cm.n_clusters, cfg.policy_hidden, cfg.seed, "clusters")
    inputs = EstimatorInputs(regressor=f, second=second, cluster_map=cm,
                             logging_probs=_logging_for(logging, D.contexts))
    first, curve = train_policy(first, D, cfg, inputs, evaluate)
    env = probe_env if probe_env is not None else (logging if hasattr(logging, "q") else None)
    if env is not None:
        probe = probe_contexts
        if probe is None:
            probe = env.contexts if env.is_discrete else D.contexts[: min(len(D), 500)]
        diag["local_correctness_residual"] = local_correctness_residual(f, env, probe, cm)
    diag["regressor"] = f
    return OverallPolicy(first, second), curve, diag


def run_baseline(method: str, D: LoggedDataset, cfg: TrainConfig = TrainConfig(), logging=None,
                 q_hat=None, evaluate: Optional[Callable] = None, cluster_map: Optional[ClusterMap] = None):
    """Reg-based or a single-stage policy-gradient baseline; returns (policy, LearningCurve).

    Reg-based picks its temperature from ``cfg.temperature_grid`` by
    ``evaluate`` when given (test-value tuning), else uses ``cfg.temperature``.
    """
    if method not in BASELINES:
        raise ConfigurationError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    if len(D) == 0:
        raise ConfigurationError("empty logged dataset")
    cm = cluster_map or D.cluster_map
    if method == "ips" and cfg.sips_fraction < 1:
        # IPS with the relevant-action selector
        method = "sips"
    needs_model = method in ("reg_based", "dr", "potec1") or (method == "sips" and cfg.sips_fraction < 1)
    if q_hat is None and needs_model:
        q_hat = fit_conventional(D, cfg.regression, cm.n_actions)
    if method == "reg_based":
        curve = LearningCurve()
        if evaluate is None:
            pol = RegressionPolicy(q_hat, cfg.temperature)
            curve.append(0, math.nan, 0.0)
            return pol, curve
        scored = [(evaluate(RegressionPolicy(q_hat, t)), i, t) for i, t in enumerate(cfg.temperature_grid)]
        best = max(scored, key=lambda s: (s[0], -s[1]))
        curve.append(0, best[0], 0.0)
        return RegressionPolicy(q_hat, best[2]), curve
    p = SoftmaxPolicy.init(D.context_dim, cm.n_actions, cfg.policy_hidden, cfg.seed)
    inputs = EstimatorInputs(
        regressor=q_hat,
        selector=None if method != "sips" else (
            ActionSelector(q_hat, cfg.sips_fraction) if cfg.sips_fraction < 1 else _FullSelector()),
        cluster_map=cm,
        logging_probs=_logging_for(logging, D.contexts) if method == "potec1" else None,
    )
    return train_policy(p, D, replace(cfg, estimator=method), inputs, evaluate)


class _FullSelector:
    """Phi = A; no model needed."""

    def mask(self, X):
        return None


def baseline_grid(method: str, cfg: TrainConfig) -> list[TrainConfig]:
    """Configs spanning the baseline search space (fraction only for IPS-style weighting)."""
    out = []
    fractions = cfg.fraction_grid if method in ("ips", "sips") else (cfg.sips_fraction,)
    for lr in cfg.learning_rate_grid:
        for wd in cfg.weight_decay_grid:
            for b in cfg.batch_size_grid:
                for fr in fractions:
                    out.append(replace(cfg, learning_rate=lr, weight_decay=wd, batch_size=b, sips_fraction=fr))
    return out


def tune_baseline(method: str, D: LoggedDataset, cfg: TrainConfig, evaluate: Callable, configs=None, **kw):
    """Run every config and keep the one with the best final exact value.

    This is oracle tuning: the selection uses the true test value.
    Returns (policy, curve, chosen config).
    """
    configs = baseline_grid(method, cfg) if configs is None else configs
    best = None
    for i, c in enumerate(configs):
        pol, curve = run_baseline(method, D, c, evaluate=evaluate, **kw)
        if best is None or curve.final_value > best[1].final_value:
            best = (pol, curve, c)
    return best
