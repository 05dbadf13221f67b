"""Exact bias/variance formulas and Monte-Carlo machinery to check estimators.

Everything exact here needs a discrete-context environment (a finite list of
contexts with probabilities). Estimators are affine in the reward, so the
law of a single record is handled analytically: evaluate at ``r = q`` for the
mean and use the reward slope times the reward variance for the noise part.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bandit_env import LoggedDataset, sample_logged_data
from .errors import ConfigurationError, SupportError, UnsupportedModeError
from .grad_estimators import (
    ESTIMATORS,
    ActionSelector,
    dr_pg,
    ips_pg,
    potec_one_stage_pg,
    potec_pg,
    sips_pg,
    true_action_gradient,
    true_first_stage_gradient,
)
from .policy import OverallPolicy, cluster_marginal


@dataclass
class BiasVarianceReport:
    """``*_variance_trace`` is n * tr(Cov) of the n-record estimator, so it is
    comparable to the single-record closed forms."""

    closed_form_bias: Optional[np.ndarray]
    closed_form_variance_trace: Optional[float]
    mc_mean: np.ndarray
    mc_variance_trace: float
    mc_std_errors: np.ndarray
    n_replications: int
    n_per_replication: int = 1
    mc_bias: Optional[np.ndarray] = None
    replicates: Optional[np.ndarray] = field(default=None, repr=False)

    def bias_z_scores(self) -> np.ndarray:
        if self.mc_bias is None:
            raise ConfigurationError("report has no reference gradient")
        se = np.where(self.mc_std_errors > 0, self.mc_std_errors, np.inf)
        return np.abs(self.mc_bias) / se

    def bias_within(self, n_se: float = 3.0) -> bool:
        return bool(np.all(self.bias_z_scores() <= n_se))

    def summary(self) -> str:
        lines = [
            f"replications      {self.n_replications} x n={self.n_per_replication}",
            f"mc variance trace {self.mc_variance_trace:.6g}",
        ]
        if self.closed_form_variance_trace is not None:
            lines.append(f"closed-form trace {self.closed_form_variance_trace:.6g}")
        if self.mc_bias is not None:
            lines.append(f"max |bias|/SE     {float(np.max(self.bias_z_scores())):.3f}")
        if self.closed_form_bias is not None:
            lines.append(f"closed-form |bias| {float(np.linalg.norm(self.closed_form_bias)):.6g}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "mc_mean", "mc_std_error", "mc_bias", "closed_form_bias"])
            for j in range(len(self.mc_mean)):
                w.writerow([
                    j, repr(float(self.mc_mean[j])), repr(float(self.mc_std_errors[j])),
                    "" if self.mc_bias is None else repr(float(self.mc_bias[j])),
                    "" if self.closed_form_bias is None else repr(float(self.closed_form_bias[j])),
                ])


def _require_discrete(env) -> tuple[np.ndarray, np.ndarray]:
    if not getattr(env, "is_discrete", False):
        raise UnsupportedModeError("exact oracles need a discrete-context environment")
    X = np.atleast_2d(env.contexts)
    return X, np.asarray(env.context_weights, dtype=float)


def _score_sum(first, X, K) -> np.ndarray:
    """sum_i sum_c K[i, c] grad log pi1(c | x_i), through the logit upstream."""
    pi = first.probs(X)
    upstream = (K - pi * K.sum(axis=1, keepdims=True)) / first.temperature
    return first.net.param_gradient(X, upstream)


def cluster_value(env, second, x, c: int) -> float:
    """q^{pi2}(x, c): mean of the true q under the second stage inside cluster ``c``."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if not 0 <= c < second.cluster_map.n_clusters:
        raise ConfigurationError(f"cluster {c} out of range")
    return float(second.cluster_expectation(X, env.q(X))[0, c])


# --- closed forms --------------------------------------------------------------

def potec_bias_closed_form(env, overall: OverallPolicy, f) -> np.ndarray:
    """Pairwise within-cluster bias sum for the POTEC estimator (single record).

    ``pi0(a|c) pi0(b|c) (w_b - w_a) = (pi0_a pi_b - pi0_b pi_a) / pi0(c)^2``
    is used so unsupported actions do not divide by zero.
    """
    X, px = _require_discrete(env)
    cm = overall.second.cluster_map
    pi0 = env.logging_probs(X)
    pi = overall.probs(X)
    e = env.q(X) - f.predict(X)
    pi0c = cluster_marginal(pi0, cm)
    if np.any(pi0c <= 0):
        raise SupportError("zero logging cluster marginal", int(np.flatnonzero((pi0c <= 0).any(axis=1))[0]))
    K = np.zeros((len(X), cm.n_clusters))
    for c in range(cm.n_clusters):
        m = cm.members(c)
        E, P0, P = e[:, m], pi0[:, m], pi[:, m]
        de = E[:, :, None] - E[:, None, :]
        dw = P0[:, :, None] * P[:, None, :] - P0[:, None, :] * P[:, :, None]
        upper = np.triu(np.ones((len(m), len(m)), dtype=bool), k=1)
        # pi0(c) * (...)/pi0(c)^2
        K[:, c] = (de * dw)[:, upper].sum(axis=1) / pi0c[:, c]
    return _score_sum(overall.first, X, K * px[:, None])


@dataclass(frozen=True)
class VarianceTerms:
    reward_noise: float
    action_sampling: float
    context_sampling: float

    @property
    def total(self) -> float:
        return self.reward_noise + self.action_sampling + self.context_sampling


def potec_variance_terms(env, overall: OverallPolicy, f) -> VarianceTerms:
    """Three-term single-record trace variance of the POTEC estimator."""
    X, px = _require_discrete(env)
    cm = overall.second.cluster_map
    first = overall.first
    pi0 = env.logging_probs(X)
    pi0c = cluster_marginal(pi0, cm)
    if np.any(pi0c <= 0):
        raise SupportError("zero logging cluster marginal", int(np.flatnonzero((pi0c <= 0).any(axis=1))[0]))
    pi1 = first.probs(X)
    wc = pi1 / pi0c
    S = first.score_jacobian(X)  # (k, C, P)
    ns = np.einsum("kcp,kcp->kc", S, S)
    q = env.q(X)
    resid = q - f.predict(X)
    sig2 = env.reward_variance(X)
    ca = cm.assignment
    w_a, ns_a = wc[:, ca], ns[:, ca]

    t1 = np.sum(px * np.sum(pi0 * w_a**2 * ns_a * sig2, axis=1))
    second_moment = np.sum(pi0 * w_a**2 * resid**2 * ns_a, axis=1)
    coef = wc * ((pi0 * resid) @ cm.membership)  # (k, C)
    mean_vec = np.einsum("kc,kcp->kp", coef, S)
    t2 = np.sum(px * (second_moment - np.einsum("kp,kp->k", mean_vec, mean_vec)))
    qc = overall.second.cluster_expectation(X, q)
    G = np.einsum("kc,kcp->kp", pi1 * qc, S)
    Gbar = px @ G
    t3 = float(px @ np.einsum("kp,kp->k", G, G) - Gbar @ Gbar)
    return VarianceTerms(float(t1), float(t2), t3)


def potec_variance_closed_form(env, overall: OverallPolicy, f) -> float:
    return potec_variance_terms(env, overall, f).total


def dr_variance_terms(env, p, q_hat) -> VarianceTerms:
    """Three-term single-record trace variance of DR (IPS when ``q_hat`` is 0).

    Uses ``w(x, a) s(x, a) = grad pi(a|x) / pi0(a|x)``.
    """
    X, px = _require_discrete(env)
    pi0 = env.logging_probs(X)
    J = p.prob_jacobian(X)  # (k, A, P)
    nj = np.einsum("kap,kap->ka", J, J)
    bad = (pi0 <= 0) & (nj > 0)
    if np.any(bad):
        raise SupportError("target puts gradient mass on an unsupported action",
                           int(np.flatnonzero(bad.any(axis=1))[0]))
    inv = np.where(pi0 > 0, 1.0 / np.where(pi0 > 0, pi0, 1.0), 0.0)
    q = env.q(X)
    Qh = np.broadcast_to(q_hat.predict(X) if hasattr(q_hat, "predict") else q_hat, q.shape)
    resid = q - Qh
    sig2 = env.reward_variance(X)
    t1 = np.sum(px * np.sum(nj * inv * sig2, axis=1))
    mean_vec = np.einsum("ka,kap->kp", resid, J)
    t2 = np.sum(px * (np.sum(nj * inv * resid**2, axis=1) - np.einsum("kp,kp->k", mean_vec, mean_vec)))
    G = np.einsum("ka,kap->kp", q, J)
    Gbar = px @ G
    t3 = float(px @ np.einsum("kp,kp->k", G, G) - Gbar @ Gbar)
    return VarianceTerms(float(t1), float(t2), t3)


def dr_variance_closed_form(env, p, q_hat) -> float:
    return dr_variance_terms(env, p, q_hat).total


# --- exhaustive enumeration ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class RecordLaw:
    """Every supported (x, a) pair with its probability and reward moments."""

    data: LoggedDataset
    prob: np.ndarray
    reward_var: np.ndarray


def record_law(env) -> RecordLaw:
    X, px = _require_discrete(env)
    pi0 = env.logging_probs(X)
    k, A = pi0.shape
    xi, a = np.nonzero(pi0 > 0)
    cm = env.cluster_map
    q = env.q(X)
    D = LoggedDataset(X[xi], a.astype(np.int64), cm.assignment[a], q[xi, a], pi0[xi, a], cm)
    return RecordLaw(D, px[xi] * pi0[xi, a], env.reward_variance(X)[xi, a])


def exhaustive_moments(estimator: Callable, env, law: Optional[RecordLaw] = None) -> tuple[np.ndarray, float]:
    """(E[g], tr Cov[g]) of a single-record estimator under the exact record law.

    ``estimator(D, per_record=True)`` must return one row per record.
    """
    law = record_law(env) if law is None else law
    D = law.data
    g0 = estimator(D, per_record=True)
    g1 = estimator(LoggedDataset(D.contexts, D.actions, D.clusters, D.rewards + 1.0,
                                 D.propensities, D.cluster_map), per_record=True)
    slope = g1 - g0
    mean = law.prob @ g0
    second = law.prob @ (np.einsum("np,np->n", g0, g0) + np.einsum("np,np->n", slope, slope) * law.reward_var)
    return mean, float(second - mean @ mean)


def exhaustive_mean(estimator: Callable, env) -> np.ndarray:
    return exhaustive_moments(estimator, env)[0]


# --- estimator factory ---------------------------------------------------------

def make_estimator(name: str, policy, env=None, regressor=None, selector: Optional[ActionSelector] = None,
                   cluster_map=None) -> Callable:
    """Bind an estimator enum to its inputs: returns ``est(D, per_record=False)``.

    For ``potec`` the policy must be an OverallPolicy; its first stage is the
    one being differentiated and logging cluster marginals come from ``env``.
    """
    if name not in ESTIMATORS:
        raise ConfigurationError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    if name == "ips":
        return lambda D, per_record=False: ips_pg(D, policy, per_record)
    if name == "dr":
        if regressor is None:
            raise ConfigurationError("dr needs a reward regressor")
        return lambda D, per_record=False: dr_pg(D, policy, regressor, per_record)
    if name == "sips":
        if selector is None:
            raise ConfigurationError("sips needs an action selector")
        return lambda D, per_record=False: sips_pg(D, policy, selector, per_record)
    if regressor is None or env is None:
        raise ConfigurationError(f"{name} needs a regressor and the environment")
    if name == "potec":
        if not isinstance(policy, OverallPolicy):
            raise ConfigurationError("potec needs an OverallPolicy")
        cm = policy.second.cluster_map if cluster_map is None else cluster_map
        return lambda D, per_record=False: potec_pg(
            D, policy.first, policy.second, regressor, cm, env.logging_probs(D.contexts), per_record)
    cm = env.cluster_map if cluster_map is None else cluster_map
    return lambda D, per_record=False: potec_one_stage_pg(
        D, policy, regressor, cm, env.logging_probs(D.contexts), per_record)


def true_gradient(env, policy, contexts=None, weights=None) -> np.ndarray:
    """Exact gradient of the policy value over ``contexts`` (all of them, weighted, when discrete)."""
    if contexts is None:
        contexts, weights = _require_discrete(env)
    if isinstance(policy, OverallPolicy):
        return true_first_stage_gradient(env, policy.first, policy.second, contexts, weights)
    return true_action_gradient(env, policy, contexts, weights)


# --- Monte Carlo ----------------------------------------------------------------

def monte_carlo_moments(estimator: Callable, env, n_per_replication: int, n_replications: int, seed,
                        truth: Optional[np.ndarray] = None, chunk_records: int = 100_000,
                        keep_replicates: bool = False, closed_form_bias=None,
                        closed_form_variance_trace=None) -> BiasVarianceReport:
    """Independent replications of (sample n records, evaluate estimator).

    Records are drawn in chunks of whole replications; each chunk has its own
    seed ``[seed, chunk]`` so results do not depend on the chunk layout beyond
    the chunk size.
    """
    if n_per_replication < 1 or n_replications < 2:
        raise ConfigurationError("need n_per_replication >= 1 and n_replications >= 2")
    n = n_per_replication
    reps_per_chunk = max(1, chunk_records // n)
    count, mean, m2 = 0, None, None
    kept = []
    for chunk, start in enumerate(range(0, n_replications, reps_per_chunk)):
        R = min(reps_per_chunk, n_replications - start)
        D = sample_logged_data(env, R * n, [int(s) for s in np.atleast_1d(seed)] + [chunk])
        G = estimator(D, per_record=True).reshape(R, n, -1).mean(axis=1)
        if keep_replicates:
            kept.append(G)
        cm_ = G.mean(axis=0)
        cm2 = ((G - cm_) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = R, cm_, cm2
        else:
            # pairwise merge of (count, mean, M2)
            delta = cm_ - mean
            tot = count + R
            mean = mean + delta * R / tot
            m2 = m2 + cm2 + delta**2 * count * R / tot
            count = tot
    var = m2 / (count - 1)
    return BiasVarianceReport(
        closed_form_bias=closed_form_bias,
        closed_form_variance_trace=closed_form_variance_trace,
        mc_mean=mean,
        mc_variance_trace=float(n * var.sum()),
        mc_std_errors=np.sqrt(var / count),
        n_replications=count,
        n_per_replication=n,
        mc_bias=None if truth is None else mean - truth,
        replicates=np.concatenate(kept) if keep_replicates else None,
    )


def replicate_gradients(estimators: dict, env, n: int, n_replications: int, seed) -> dict:
    """Full-dataset gradients of several estimators on shared replications.

    Returns ``{name: (n_replications, P)}``; every estimator sees the same
    dataset in each replication.
    """
    out = {k: [] for k in estimators}
    for r in range(n_replications):
        D = sample_logged_data(env, n, [int(s) for s in np.atleast_1d(seed)] + [r])
        for k, est in estimators.items():
            out[k].append(est(D))
    return {k: np.array(v) for k, v in out.items()}


def trace_covariance(G: np.ndarray) -> float:
    return float(np.var(G, axis=0, ddof=1).sum())


def _resampled_traces(K: np.ndarray, idx: np.ndarray) -> float:
    # tr Cov of rows idx from the Gram matrix: (sum_j K_jj - R |mean|^2) / (R - 1)
    R = len(idx)
    return float((K[idx, idx].sum() - K[np.ix_(idx, idx)].sum() / R) / (R - 1))


def bootstrap_trace_gap_se(Ga: np.ndarray, Gb: np.ndarray, n_resamples: int = 1000, seed=0) -> float:
    """Bootstrap SE of tr Cov(Ga) - tr Cov(Gb), resampling shared replications."""
    rng = np.random.default_rng(seed)
    R = len(Ga)
    Ka, Kb = Ga @ Ga.T, Gb @ Gb.T
    gaps = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = rng.integers(0, R, R)
        gaps[b] = _resampled_traces(Ka, idx) - _resampled_traces(Kb, idx)
    return float(np.std(gaps, ddof=1))


def within_relative(a: float, b: float, rel: float) -> bool:
    return math.isfinite(a) and math.isfinite(b) and abs(a - b) <= rel * abs(b)
