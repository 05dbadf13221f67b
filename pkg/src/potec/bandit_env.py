"""Synthetic contextual bandits with clustered actions.

Expected reward decomposes as ``q(x, a) = g(x, c_a) + h_{c_a}(x, a)``:

* ``g(x, c) = g_base(x, c) + sum_k u_k 1{threshold_k(x)}`` with
  ``g_base(x, c) = 3 tanh(x'A_c x + b_c'x)``,
* ``h_c(x, a) = x'M_c onehot_a + theta_{x,c}'x + theta_{a,c}'onehot_a``.

The logging policy is ``softmax_a(beta q(x, a) + mu(x, a))`` with
``mu(x, a) = clip(x'W onehot_a, -2, 2)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation

BERNOULLI_CLIP = 0.01
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ClusterMap:
    assignment: np.ndarray
    n_clusters: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1 or a.size == 0:
            raise ConfigurationError("cluster assignment must be a non-empty vector")
        if self.n_clusters < 1:
            raise ConfigurationError("n_clusters must be >= 1")
        if a.min() < 0 or a.max() >= self.n_clusters:
            raise ConfigurationError("cluster index out of range")
        counts = np.bincount(a, minlength=self.n_clusters)
        if np.any(counts == 0):
            raise ConfigurationError(f"empty clusters: {np.flatnonzero(counts == 0).tolist()}")
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "n_clusters", int(self.n_clusters))

    @classmethod
    def singletons(cls, n_actions: int) -> "ClusterMap":
        return cls(np.arange(n_actions), n_actions)

    @property
    def n_actions(self) -> int:
        return self.assignment.size

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)

    @property
    def membership(self) -> np.ndarray:
        """(n_actions, n_clusters) 0/1 matrix."""
        m = np.zeros((self.n_actions, self.n_clusters))
        m[np.arange(self.n_actions), self.assignment] = 1.0
        return m

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == c)

    def __eq__(self, other):
        return (
            isinstance(other, ClusterMap)
            and self.n_clusters == other.n_clusters
            and np.array_equal(self.assignment, other.assignment)
        )


def perturb_clusters(cm: ClusterMap, noise_ratio: float, seed, max_tries: int = 100) -> ClusterMap:
    """Move each action to a uniformly random *other* cluster with prob ``noise_ratio``.

    Draws that would leave a cluster empty are redrawn from the same stream.
    """
    if not 0.0 <= noise_ratio <= 1.0:
        raise ConfigurationError("noise_ratio must lie in [0, 1]")
    if noise_ratio == 0.0 or cm.n_clusters == 1:
        return cm
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        flip = rng.random(cm.n_actions) < noise_ratio
        shift = rng.integers(1, cm.n_clusters, size=cm.n_actions)
        new = np.where(flip, (cm.assignment + shift) % cm.n_clusters, cm.assignment)
        if np.all(np.bincount(new, minlength=cm.n_clusters) > 0):
            return ClusterMap(new, cm.n_clusters)
    raise ConfigurationError("cluster perturbation keeps emptying a cluster")


@dataclass(frozen=True)
class EnvConfig:
    n_actions: int = 2000
    n_clusters: int = 30
    context_dim: int = 10
    beta: float = 0.0
    reward_noise: str = "gaussian"  # or "bernoulli"
    reward_std: float = 1.0
    # 0 means continuous standard-normal contexts
    n_discrete_contexts: int = 0
    context_weights: Optional[tuple] = None
    action_feature_dim: int = 5
    reward_offset: float = 0.0

    def validate(self) -> None:
        if self.n_actions < 1 or self.n_clusters < 1:
            raise ConfigurationError("need at least one action and one cluster")
        if self.n_clusters > self.n_actions:
            raise ConfigurationError("n_clusters cannot exceed n_actions")
        if self.context_dim < 1:
            raise ConfigurationError("context_dim must be >= 1")
        if self.reward_noise not in ("gaussian", "bernoulli"):
            raise ConfigurationError(f"unknown reward_noise {self.reward_noise!r}")
        if self.reward_std < 0:
            raise ConfigurationError("reward_std must be nonnegative")
        if self.n_discrete_contexts < 0:
            raise ConfigurationError("n_discrete_contexts must be >= 0")
        if self.context_weights is not None:
            w = np.asarray(self.context_weights, dtype=float)
            if w.shape != (self.n_discrete_contexts,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
                raise ConfigurationError("context_weights must be a simplex over the discrete contexts")

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown env keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("context_weights") is not None:
            d["context_weights"] = tuple(d["context_weights"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _Environment:
    """Behaviour shared by the synthetic and tabular environments."""

    cluster_map: ClusterMap
    supported: np.ndarray
    contexts: Optional[np.ndarray]
    context_weights: Optional[np.ndarray]
    reward_noise: str
    reward_std: float

    @property
    def n_actions(self) -> int:
        return self.cluster_map.n_actions

    @property
    def n_clusters(self) -> int:
        return self.cluster_map.n_clusters

    @property
    def is_discrete(self) -> bool:
        return self.contexts is not None

    def q(self, X) -> np.ndarray:
        raise NotImplementedError

    def _logging_logits(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def logging_probs(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        logits = self._logging_logits(X)
        if not np.all(self.supported):
            logits = np.where(self.supported, logits, -np.inf)
        p = _softmax(logits)
        return p[0] if single else p

    def reward_variance(self, X) -> np.ndarray:
        q = self.q(X)
        if self.reward_noise == "bernoulli":
            return q * (1.0 - q)
        return np.full_like(q, self.reward_std**2)

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.is_discrete:
            idx = rng.choice(len(self.contexts), size=n, p=self.context_weights)
            return self.contexts[idx]
        return rng.standard_normal((n, self.context_dim))

    def sample_rewards(self, q: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.reward_noise == "bernoulli":
            return (rng.random(q.shape) < q).astype(float)
        return q + self.reward_std * rng.standard_normal(q.shape)


@dataclass(frozen=True, eq=False)
class SyntheticEnvironment(_Environment):
    config: EnvConfig
    cluster_map: ClusterMap
    action_features: np.ndarray  # (A, feature_dim)
    g_quadratic: np.ndarray  # (C, d, d)
    g_linear: np.ndarray  # (C, d)
    thresholds_u: np.ndarray  # (4,)
    residual_M: np.ndarray  # (C, d, A)
    residual_theta_x: np.ndarray  # (C, d)
    residual_theta_a: np.ndarray  # (C, A)
    logging_W: np.ndarray  # (d, A)
    contexts: Optional[np.ndarray] = None
    context_weights: Optional[np.ndarray] = None
    supported: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.supported is None:
            object.__setattr__(self, "supported", np.ones(self.cluster_map.n_actions, dtype=bool))
        A = np.arange(self.cluster_map.n_actions)
        c = self.cluster_map.assignment
        # per-action columns of the per-cluster residual parameters
        self._cache["M_eff"] = self.residual_M[c, :, A].T  # (d, A)
        self._cache["theta_a_eff"] = self.residual_theta_a[c, A]

    @property
    def context_dim(self) -> int:
        return self.config.context_dim

    @property
    def beta(self) -> float:
        return self.config.beta

    @property
    def reward_noise(self) -> str:
        return self.config.reward_noise

    @property
    def reward_std(self) -> float:
        return self.config.reward_std

    def cluster_effect(self, X) -> np.ndarray:
        """g(x, c) for every cluster, shape (n, C)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        quad = np.einsum("ni,cij,nj->nc", X, self.g_quadratic, X)
        g = 3.0 * np.tanh(quad + X @ self.g_linear.T)
        # 1-indexed coordinate ranges; missing coordinates contribute 0
        s = lambda lo, hi: X[:, lo - 1 : hi].sum(axis=1)
        u = self.thresholds_u
        bonus = (
            u[0] * (s(1, 3) < 1.5)
            + u[1] * (s(3, 8) < -0.5)
            + u[2] * (s(2, 3) > 3.0)
            + u[3] * (s(5, 10) < 1.0)
        )
        return g + bonus[:, None]

    def residual_effect(self, X) -> np.ndarray:
        """h_{c_a}(x, a), shape (n, A)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        c = self.cluster_map.assignment
        return X @ self._cache["M_eff"] + (X @ self.residual_theta_x.T)[:, c] + self._cache["theta_a_eff"]

    def q(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.context_dim:
            raise ContractViolation(f"context has dim {X.shape[1]}, expected {self.context_dim}")
        q = self.cluster_effect(X)[:, self.cluster_map.assignment] + self.residual_effect(X)
        q = q + self.config.reward_offset
        if self.config.reward_noise == "bernoulli":
            q = np.clip(q, BERNOULLI_CLIP, 1.0 - BERNOULLI_CLIP)
        return q[0] if single else q

    def mu(self, X) -> np.ndarray:
        return np.clip(np.atleast_2d(X) @ self.logging_W, -2.0, 2.0)

    def _logging_logits(self, X):
        return self.config.beta * self.q(X) + self.mu(X)


def _balanced_clusters(features: np.ndarray, n_clusters: int, rng) -> np.ndarray:
    direction = rng.standard_normal(features.shape[1])
    order = np.argsort(features @ direction, kind="stable")
    assignment = np.empty(len(order), dtype=np.int64)
    for c, chunk in enumerate(np.array_split(order, n_clusters)):
        assignment[chunk] = c
    return assignment


def build_synthetic_env(config: EnvConfig, seed) -> SyntheticEnvironment:
    config.validate()
    rng = np.random.default_rng(seed)
    A, C, d = config.n_actions, config.n_clusters, config.context_dim
    features = rng.standard_normal((A, config.action_feature_dim))
    cm = ClusterMap(_balanced_clusters(features, C, rng), C)
    env = dict(
        config=config,
        cluster_map=cm,
        action_features=features,
        g_quadratic=rng.uniform(-1, 1, (C, d, d)),
        g_linear=rng.uniform(-1, 1, (C, d)),
        thresholds_u=rng.uniform(-3, 3, 4),
        residual_M=rng.uniform(-1, 1, (C, d, A)),
        residual_theta_x=rng.uniform(-1, 1, (C, d)),
        residual_theta_a=rng.uniform(-1, 1, (C, A)),
        logging_W=rng.uniform(-1, 1, (d, A)),
    )
    if config.n_discrete_contexts > 0:
        k = config.n_discrete_contexts
        env["contexts"] = rng.standard_normal((k, d))
        env["context_weights"] = (
            np.full(k, 1.0 / k) if config.context_weights is None else np.asarray(config.context_weights, float)
        )
    return SyntheticEnvironment(**env)


@dataclass(frozen=True, eq=False)
class TabularEnvironment(_Environment):
    """Finite-context environment given by explicit tables.

    Used for hand-built fixtures; contexts are looked up by exact value.
    """

    contexts: np.ndarray  # (k, d)
    q_table: np.ndarray  # (k, A)
    cluster_map: ClusterMap
    context_weights: Optional[np.ndarray] = None
    logging_table: Optional[np.ndarray] = None  # (k, A) logits-free probabilities
    reward_noise: str = "gaussian"
    reward_std: float = 0.0
    supported: Optional[np.ndarray] = None
    _index: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.contexts, dtype=float))
        object.__setattr__(self, "contexts", X)
        object.__setattr__(self, "q_table", np.atleast_2d(np.asarray(self.q_table, dtype=float)))
        k = len(X)
        if self.context_weights is None:
            object.__setattr__(self, "context_weights", np.full(k, 1.0 / k))
        if self.logging_table is None:
            object.__setattr__(self, "logging_table", np.full(self.q_table.shape, 1.0 / self.q_table.shape[1]))
        if self.supported is None:
            object.__setattr__(self, "supported", np.ones(self.q_table.shape[1], dtype=bool))
        for i, row in enumerate(X):
            self._index[row.tobytes()] = i

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]

    def _rows(self, X: np.ndarray) -> np.ndarray:
        try:
            return np.array([self._index[np.asarray(r, dtype=float).tobytes()] for r in X])
        except KeyError:
            raise ContractViolation("context not in the tabular environment") from None

    def q(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        q = self.q_table[self._rows(np.atleast_2d(X))]
        return q[0] if single else q

    def _logging_logits(self, X):
        with np.errstate(divide="ignore"):
            return np.log(self.logging_table[self._rows(X)])


def expected_reward(env: _Environment, x, a: int) -> float:
    if not 0 <= a < env.n_actions:
        raise ContractViolation(f"action {a} out of range")
    return float(env.q(np.asarray(x, dtype=float))[a])


def logging_policy_probs(env: _Environment, x) -> np.ndarray:
    return env.logging_probs(x)


def restrict_support(env: _Environment, n_unsupported: int, seed) -> _Environment:
    """Zero out logging probability on ``n_unsupported`` random actions."""
    if n_unsupported == 0:
        return env
    if not 0 <= n_unsupported < env.n_actions:
        raise ConfigurationError("n_unsupported must be in [0, n_actions)")
    rng = np.random.default_rng(seed)
    drop = rng.permutation(env.n_actions)[:n_unsupported]
    supported = np.array(env.supported, copy=True)
    supported[drop] = False
    left = np.bincount(env.cluster_map.assignment[supported], minlength=env.n_clusters)
    if np.any(left == 0):
        raise ConfigurationError(
            "restriction would remove full cluster support for clusters "
            f"{np.flatnonzero(left == 0).tolist()}"
        )
    return replace(env, supported=supported)


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    contexts: np.ndarray
    actions: np.ndarray
    clusters: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray
    cluster_map: ClusterMap

    def __post_init__(self):
        if not np.array_equal(self.clusters, self.cluster_map.assignment[self.actions]):
            raise ContractViolation("cluster field disagrees with the cluster map")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]

    def subset(self, idx) -> "LoggedDataset":
        return LoggedDataset(
            self.contexts[idx], self.actions[idx], self.clusters[idx],
            self.rewards[idx], self.propensities[idx], self.cluster_map,
        )

    def with_cluster_map(self, cm: ClusterMap) -> "LoggedDataset":
        return replace(self, clusters=cm.assignment[self.actions], cluster_map=cm)

    def to_csv(self, path) -> None:
        d = self.context_dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"ctx_{j}" for j in range(d)] + ["action", "cluster", "reward", "propensity"])
            for i in range(len(self)):
                w.writerow(
                    [repr(float(v)) for v in self.contexts[i]]
                    + [int(self.actions[i]), int(self.clusters[i]),
                       repr(float(self.rewards[i])), repr(float(self.propensities[i]))]
                )

    @classmethod
    def from_csv(cls, path, cluster_map: ClusterMap) -> "LoggedDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(h.startswith("ctx_") for h in header)
        arr = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(
            arr[:, :d], arr[:, d].astype(np.int64), arr[:, d + 1].astype(np.int64),
            arr[:, d + 2], arr[:, d + 3], cluster_map,
        )


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one action per row; zero-probability actions are never drawn."""
    cum = np.cumsum(probs, axis=1)
    u = (1.0 - rng.random(len(probs))) * cum[:, -1]
    idx = (cum < u[:, None]).sum(axis=1)
    # rounding can push idx past the last positive entry
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def sample_logged_data(env: _Environment, n: int, seed, repeats_per_context: int = 1) -> LoggedDataset:
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if repeats_per_context < 1:
        raise ConfigurationError("repeats_per_context must be >= 1")
    rng = np.random.default_rng(seed)
    n_draws = math.ceil(n / repeats_per_context)
    X = np.repeat(env.sample_contexts(n_draws, rng), repeats_per_context, axis=0)[:n]
    pi0 = env.logging_probs(X)
    actions = sample_actions(pi0, rng)
    rows = np.arange(n)
    q = env.q(X)[rows, actions]
    rewards = env.sample_rewards(q, rng)
    cm = env.cluster_map
    return LoggedDataset(X, actions, cm.assignment[actions], rewards, pi0[rows, actions], cm)


def _as_probs(policy, X: np.ndarray) -> np.ndarray:
    if hasattr(policy, "probs"):
        return policy.probs(X)
    return np.asarray(policy(X), dtype=float)


def policy_value(env: _Environment, overall_policy, contexts, weights=None) -> float:
    """Exact value ``mean_x sum_a pi(a|x) q(x, a)`` (weighted when ``weights`` is given)."""
    X = np.atleast_2d(np.asarray(contexts, dtype=float))
    pi = _as_probs(overall_policy, X)
    if pi.shape != (len(X), env.n_actions):
        raise ContractViolation(f"policy returned shape {pi.shape}")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > SIMPLEX_TOL:
        raise ContractViolation("policy output is not a probability simplex")
    per_context = (pi * env.q(X)).sum(axis=1)
    if weights is None:
        return float(per_context.mean())
    return float(np.dot(weights, per_context))


def make_noisy_regression_model(env: _Environment, sigma_c: float, sigma_a: float, seed):
    """Frozen regressor ``q + eps_{c_a} + eps_a`` with noise drawn once."""
    from .reward_models import NoisyOracleRegressor

    if sigma_c < 0 or sigma_a < 0:
        raise ConfigurationError("noise scales must be nonnegative")
    rng = np.random.default_rng(seed)
    eps_c = sigma_c * rng.standard_normal(env.n_clusters)
    eps_a = sigma_a * rng.standard_normal(env.n_actions)
    return NoisyOracleRegressor(env, eps_c, eps_a)


# --- config documents -------------------------------------------------------

def load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_toml(doc: dict) -> str:
    """Minimal writer for ``{section: {key: scalar-or-list}}`` documents."""
    lines = []
    for section, body in doc.items():
        lines.append(f"[{section}]")
        for k, v in body.items():
            if v is not None:
                lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def save_env_config(config: EnvConfig, path) -> None:
    Path(path).write_text(dump_toml({"env": config.to_dict()}))


def load_env_config(path) -> EnvConfig:
    return EnvConfig.from_dict(load_toml(path).get("env", {}))
