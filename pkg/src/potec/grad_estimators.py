"""Policy-gradient estimators from logged bandit data.

Each estimator is written as ``(1/n) sum_i sum_k V[i, k] grad pi(k | x_i)``
and only differs in how ``V`` is filled: ``w r s = (r / pi0) grad pi`` for
the logged outcome, ``E_pi[f s] = sum_k f_k grad pi_k`` for model terms.
The ``*_upstream`` helpers build ``V`` from plain arrays so the trainer can
reuse them on minibatches with cached regression outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bandit_env import ClusterMap, LoggedDataset
from .errors import ConfigurationError, ContractViolation, SupportError
from .policy import cluster_marginal

ESTIMATORS = ("ips", "dr", "sips", "potec", "potec1")


def _check_positive(p: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~(p > 0))
    if bad.size:
        raise SupportError(f"zero {what}", int(bad[0]))


def _finish(policy, X, V, per_record: bool) -> np.ndarray:
    if per_record:
        return policy.prob_gradient(X, V, per_record=True)
    return policy.prob_gradient(X, V) / len(X)


def _predict(model, X) -> np.ndarray:
    if isinstance(model, np.ndarray):
        return model
    # environments score with their true q
    return model.predict(X) if hasattr(model, "predict") else model.q(X)


# --- upstream builders ---------------------------------------------------------

def ips_upstream(actions, rewards, propensities, n_outcomes: int) -> np.ndarray:
    _check_positive(propensities, "logging propensity")
    V = np.zeros((len(actions), n_outcomes))
    V[np.arange(len(actions)), actions] = rewards / propensities
    return V


def dr_upstream(actions, rewards, propensities, q_hat: np.ndarray) -> np.ndarray:
    _check_positive(propensities, "logging propensity")
    rows = np.arange(len(actions))
    V = np.array(q_hat, dtype=float, copy=True)
    V[rows, actions] += (rewards - q_hat[rows, actions]) / propensities
    return V


def sips_upstream(actions, rewards, propensities, pi: np.ndarray, mask: np.ndarray) -> np.ndarray:
    _check_positive(propensities, "logging propensity")
    rows = np.arange(len(actions))
    mass = np.where(mask.all(axis=1), 1.0, (pi * mask).sum(axis=1))
    V = np.zeros_like(pi)
    kept = mask[rows, actions]
    V[rows[kept], actions[kept]] = rewards[kept] / (propensities[kept] * mass[kept])
    return V


def potec_upstream(clusters, rewards, cluster_propensities, f_logged, f_cluster) -> np.ndarray:
    """``f_logged[i] = f(x_i, a_i)``, ``f_cluster[i, c] = E_{pi2(.|x_i,c)}[f(x_i, .)]``."""
    _check_positive(cluster_propensities, "logging cluster propensity")
    V = np.array(f_cluster, dtype=float, copy=True)
    V[np.arange(len(clusters)), clusters] += (rewards - f_logged) / cluster_propensities
    return V


def potec_one_stage_upstream(actions, clusters, rewards, cluster_propensities,
                             pi: np.ndarray, pi_cluster: np.ndarray, f_hat: np.ndarray) -> np.ndarray:
    _check_positive(cluster_propensities, "logging cluster propensity")
    rows = np.arange(len(actions))
    V = np.array(f_hat, dtype=float, copy=True)
    # w(x, c) s(x, a) = (pi(c)/pi(a)) / pi0(c) * grad pi(a)
    ratio = pi_cluster[rows, clusters] / pi[rows, actions]
    V[rows, actions] += ((rewards - f_hat[rows, actions]) * ratio) / cluster_propensities
    return V


def logged_cluster_propensities(logging_probs, actions, cm: ClusterMap) -> np.ndarray:
    """pi0(c_{a_i} | x_i) from an (n, A) logging simplex, or pass-through if already (n,)."""
    p = np.asarray(logging_probs, dtype=float)
    if p.ndim == 1:
        return p
    return cluster_marginal(p, cm)[np.arange(len(actions)), cm.assignment[actions]]


# --- selectors -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ActionSelector:
    """Per-context relevant-action set: top ``ceil(fraction * A)`` by ``scorer``,
    or ``scorer > threshold`` when ``threshold`` is set."""

    scorer: object
    fraction: float = 1.0
    threshold: Optional[float] = None

    def mask(self, X) -> np.ndarray:
        S = np.atleast_2d(_predict(self.scorer, X))
        if self.threshold is not None:
            return S > self.threshold
        A = S.shape[1]
        k = math.ceil(self.fraction * A)
        if k >= A:
            return np.ones_like(S, dtype=bool)
        # stable descending rank, lower action index wins ties
        order = np.argsort(-S, axis=1, kind="stable")[:, :k]
        m = np.zeros_like(S, dtype=bool)
        np.put_along_axis(m, order, True, axis=1)
        return m


def oracle_selector(env) -> ActionSelector:
    """Phi(x) = {a : q(x, a) > 0}."""
    return ActionSelector(env, threshold=0.0)


# --- public estimators ---------------------------------------------------------

def ips_pg(D: LoggedDataset, p, per_record: bool = False) -> np.ndarray:
    X = D.contexts
    V = ips_upstream(D.actions, D.rewards, D.propensities, p.n_outcomes if hasattr(p, "n_outcomes") else p.n_actions)
    return _finish(p, X, V, per_record)


def dr_pg(D: LoggedDataset, p, q_hat, per_record: bool = False) -> np.ndarray:
    X = D.contexts
    V = dr_upstream(D.actions, D.rewards, D.propensities, _predict(q_hat, X))
    return _finish(p, X, V, per_record)


def sips_pg(D: LoggedDataset, p, sel: ActionSelector, per_record: bool = False) -> np.ndarray:
    X = D.contexts
    V = sips_upstream(D.actions, D.rewards, D.propensities, p.probs(X), sel.mask(X))
    return _finish(p, X, V, per_record)


def potec_pg(D: LoggedDataset, first, second, f, cm: ClusterMap, logging_probs,
             per_record: bool = False) -> np.ndarray:
    if getattr(first, "outcome_space", "clusters") != "clusters":
        raise ConfigurationError("potec_pg needs a first-stage policy over clusters")
    X = D.contexts
    F = _predict(f, X)
    rows = np.arange(len(D))
    clusters = cm.assignment[D.actions]
    V = potec_upstream(
        clusters, D.rewards, logged_cluster_propensities(logging_probs, D.actions, cm),
        F[rows, D.actions], second.cluster_expectation(X, F),
    )
    return _finish(first, X, V, per_record)


def potec_one_stage_pg(D: LoggedDataset, p, f, cm: ClusterMap, logging_probs,
                       per_record: bool = False) -> np.ndarray:
    X = D.contexts
    pi = p.probs(X)
    clusters = cm.assignment[D.actions]
    V = potec_one_stage_upstream(
        D.actions, clusters, D.rewards, logged_cluster_propensities(logging_probs, D.actions, cm),
        pi, cluster_marginal(pi, cm), _predict(f, X),
    )
    return _finish(p, X, V, per_record)


# --- exact gradients -----------------------------------------------------------

def _context_weights(X, weights) -> np.ndarray:
    if weights is None:
        return np.full(len(X), 1.0 / len(X))
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(X),):
        raise ContractViolation("weights must align with contexts")
    return w


def true_first_stage_gradient(env, first, second, contexts, weights=None) -> np.ndarray:
    """E_x sum_c pi1(c|x) q^{pi2}(x, c) s(x, c), exact in q."""
    X = np.atleast_2d(contexts)
    Qc = second.cluster_expectation(X, env.q(X))
    return first.prob_gradient(X, Qc * _context_weights(X, weights)[:, None])


def true_action_gradient(env, p, contexts, weights=None) -> np.ndarray:
    X = np.atleast_2d(contexts)
    return p.prob_gradient(X, env.q(X) * _context_weights(X, weights)[:, None])
