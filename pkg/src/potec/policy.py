"""Softmax policies, the argmax second stage and the composed two-stage policy.

Every policy that can be trained exposes ``prob_gradient(X, V)``: the
parameter gradient of ``sum_i sum_k V[i, k] * pi(k | x_i)``. All gradient
estimators in :mod:`potec.grad_estimators` reduce to choosing ``V``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .bandit_env import ClusterMap, _softmax
from .errors import ContractViolation
from .func_approx import Mlp


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    net: Mlp
    outcome_space: str = "actions"  # or "clusters"
    temperature: float = 1.0

    def __post_init__(self):
        if self.outcome_space not in ("actions", "clusters"):
            raise ContractViolation(f"unknown outcome space {self.outcome_space!r}")
        if not self.temperature > 0:
            raise ContractViolation("temperature must be positive")

    @classmethod
    def init(cls, context_dim: int, n_outcomes: int, hidden=(100, 100, 100), seed=0,
             outcome_space: str = "actions") -> "SoftmaxPolicy":
        return cls(Mlp.init((context_dim, *hidden, n_outcomes), seed), outcome_space)

    @property
    def n_outcomes(self) -> int:
        return self.net.n_out

    @property
    def n_params(self) -> int:
        return self.net.n_params

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def with_params(self, params) -> "SoftmaxPolicy":
        return replace(self, net=self.net.with_params(params))

    def probs(self, X) -> np.ndarray:
        return _softmax(self.net.forward(X) / self.temperature)

    def _logit_upstream(self, pi: np.ndarray, V: np.ndarray) -> np.ndarray:
        # d pi_k / d z = pi_k (e_k - pi) / tau
        return pi * (V - (pi * V).sum(axis=-1, keepdims=True)) / self.temperature

    def prob_gradient(self, X, V, per_record: bool = False) -> np.ndarray:
        X = np.atleast_2d(X)
        V = np.atleast_2d(V)
        L = self._logit_upstream(self.probs(X), V)
        if per_record:
            return self.net.per_sample_param_gradient(X, L)
        return self.net.param_gradient(X, L)

    def score(self, x, outcome: int) -> np.ndarray:
        """grad_theta log pi(outcome | x)."""
        if not 0 <= outcome < self.n_outcomes:
            raise ContractViolation(f"outcome {outcome} out of range")
        pi = self.probs(np.asarray(x, dtype=float))
        upstream = -pi
        upstream[outcome] += 1.0
        return self.net.param_gradient(x, upstream / self.temperature)

    def prob_jacobian(self, X) -> np.ndarray:
        """(n, K, P) array of grad_theta pi(k | x_i)."""
        X = np.atleast_2d(X)
        n, K = len(X), self.n_outcomes
        pi = self.probs(X)
        eye = np.eye(K)
        # row (i, k): upstream pi_k (e_k - pi) / tau
        L = (pi[:, :, None] * (eye[None] - pi[:, None, :])) / self.temperature
        J = self.net.per_sample_param_gradient(np.repeat(X, K, axis=0), L.reshape(n * K, K))
        return J.reshape(n, K, -1)

    def score_jacobian(self, X) -> np.ndarray:
        """(n, K, P) array of score functions grad_theta log pi(k | x_i)."""
        X = np.atleast_2d(X)
        n, K = len(X), self.n_outcomes
        pi = self.probs(X)
        L = (np.eye(K)[None] - pi[:, None, :]) / self.temperature
        S = self.net.per_sample_param_gradient(np.repeat(X, K, axis=0), L.reshape(n * K, K))
        return S.reshape(n, K, -1)


def action_probs(p, x) -> np.ndarray:
    return p.probs(x)


def score_function(p: SoftmaxPolicy, x, outcome: int) -> np.ndarray:
    return p.score(x, outcome)


@dataclass(frozen=True, eq=False)
class RegressionPolicy:
    """softmax(f(x, .) / tau) for a fitted reward regressor; not trained."""

    regressor: object
    temperature: float = 1.0

    def probs(self, X) -> np.ndarray:
        return _softmax(np.atleast_2d(self.regressor.predict(X)) / self.temperature)


def cluster_marginal(pi, cm: ClusterMap) -> np.ndarray:
    """Sum action probabilities within each cluster."""
    pi = np.asarray(pi, dtype=float)
    return pi @ cm.membership


def _lowest_index_argmax(values: np.ndarray, members: np.ndarray) -> np.ndarray:
    # members are sorted ascending, np.argmax returns the first maximum
    return members[np.argmax(values[:, members], axis=1)]


@dataclass(frozen=True, eq=False)
class SecondStagePolicy:
    """Deterministic within-cluster argmax of a pairwise regressor."""

    h_model: object
    cluster_map: ClusterMap

    def choices_from_values(self, H: np.ndarray) -> np.ndarray:
        cm = self.cluster_map
        out = np.empty((len(H), cm.n_clusters), dtype=np.int64)
        for c in range(cm.n_clusters):
            out[:, c] = _lowest_index_argmax(H, cm.members(c))
        return out

    def choices(self, X) -> np.ndarray:
        """(n, C) chosen action per cluster."""
        return self.choices_from_values(np.atleast_2d(self.h_model.predict(np.atleast_2d(X))))

    def cluster_expectation(self, X, values, choices=None) -> np.ndarray:
        """E_{pi2(a|x,c)}[values(x, a)] for each cluster, shape (n, C)."""
        values = np.atleast_2d(values)
        ch = self.choices(X) if choices is None else choices
        return np.take_along_axis(values, ch, axis=1)

    def route(self, X, first_probs, choices=None) -> np.ndarray:
        first_probs = np.atleast_2d(first_probs)
        ch = self.choices(X) if choices is None else choices
        out = np.zeros((len(first_probs), self.cluster_map.n_actions))
        np.put_along_axis(out, ch, first_probs, axis=1)
        return out

    def route_jacobian(self, X, J1: np.ndarray) -> np.ndarray:
        ch = self.choices(X)
        n, C, P = J1.shape
        out = np.zeros((n, self.cluster_map.n_actions, P))
        rows = np.arange(n)[:, None]
        out[rows, ch] = J1
        return out


@dataclass(frozen=True, eq=False)
class UniformSecondStage:
    """Uniform choice within the cluster; a test-only stochastic evaluator."""

    cluster_map: ClusterMap

    def cluster_expectation(self, X, values, choices=None) -> np.ndarray:
        cm = self.cluster_map
        return np.atleast_2d(values) @ cm.membership / cm.counts

    def route(self, X, first_probs, choices=None) -> np.ndarray:
        cm = self.cluster_map
        return np.atleast_2d(first_probs)[:, cm.assignment] / cm.counts[cm.assignment]

    def route_jacobian(self, X, J1: np.ndarray) -> np.ndarray:
        cm = self.cluster_map
        return J1[:, cm.assignment, :] / cm.counts[cm.assignment][None, :, None]


def second_stage_choice(s: SecondStagePolicy, x, c: int) -> int:
    if not 0 <= c < s.cluster_map.n_clusters:
        raise ContractViolation(f"cluster {c} out of range")
    return int(s.choices(np.atleast_2d(x))[0, c])


@dataclass(frozen=True, eq=False)
class OverallPolicy:
    """pi(a|x) = sum_c pi1(c|x) pi2(a|x,c), differentiable in the first stage."""

    first: SoftmaxPolicy
    second: object

    @property
    def n_actions(self) -> int:
        return self.second.cluster_map.n_actions

    @property
    def n_params(self) -> int:
        return self.first.n_params

    def with_params(self, params) -> "OverallPolicy":
        return replace(self, first=self.first.with_params(params))

    def probs(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.second.route(X, self.first.probs(X))

    def prob_gradient(self, X, V, per_record: bool = False) -> np.ndarray:
        # sum_a V_a grad pi(a) = sum_c E_{pi2(.|c)}[V] grad pi1(c)
        X = np.atleast_2d(X)
        return self.first.prob_gradient(X, self.second.cluster_expectation(X, V), per_record)

    def prob_jacobian(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.second.route_jacobian(X, self.first.prob_jacobian(X))

    def sample_action(self, x, rng: np.random.Generator) -> tuple[int, int]:
        pi1 = self.first.probs(np.asarray(x, dtype=float))
        c = int(np.searchsorted(np.cumsum(pi1), rng.random() * pi1.sum(), side="right"))
        c = min(c, len(pi1) - 1)
        if isinstance(self.second, SecondStagePolicy):
            return c, second_stage_choice(self.second, x, c)
        return c, int(rng.choice(self.second.cluster_map.members(c)))


def overall_probs(o: OverallPolicy, x) -> np.ndarray:
    return o.probs(x)


def sample_action(o: OverallPolicy, x, rng) -> tuple[int, int]:
    return o.sample_action(x, rng)
