"""Reward regression: conventional, pairwise, cluster baseline and combined models.

All regressors expose ``predict(X) -> (n, n_actions)``. Networks are
multi-head: the context goes in, one output per action (or per cluster for
the baseline) comes out.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bandit_env import ClusterMap, LoggedDataset
from .errors import FallbackNeeded
from .func_approx import AdamConfig, AdamState, Mlp, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegressionConfig:
    hidden: tuple = (100, 100, 100)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0


@dataclass(frozen=True, eq=False)
class NetRegressor:
    net: Mlp
    kind: str = "conventional"  # or "pairwise"

    @property
    def n_actions(self) -> int:
        return self.net.n_out

    def predict(self, X) -> np.ndarray:
        return np.atleast_2d(self.net.forward(np.atleast_2d(X)))


@dataclass(frozen=True, eq=False)
class BaselineRegressor:
    """g(x, c), broadcast to actions through the cluster map."""

    net: Mlp
    cluster_map: ClusterMap
    kind: str = "baseline"

    def predict_clusters(self, X) -> np.ndarray:
        return np.atleast_2d(self.net.forward(np.atleast_2d(X)))

    def predict(self, X) -> np.ndarray:
        return self.predict_clusters(X)[:, self.cluster_map.assignment]


@dataclass(frozen=True, eq=False)
class CombinedRegressor:
    baseline: BaselineRegressor
    pairwise: object
    kind: str = "combined"

    @property
    def cluster_map(self) -> ClusterMap:
        return self.baseline.cluster_map

    def predict(self, X) -> np.ndarray:
        return self.baseline.predict(X) + self.pairwise.predict(X)


@dataclass(frozen=True, eq=False)
class NoisyOracleRegressor:
    env: object
    eps_cluster: np.ndarray
    eps_action: np.ndarray
    kind: str = "oracle_noise"

    def predict(self, X) -> np.ndarray:
        c = self.env.cluster_map.assignment
        return self.env.q(np.atleast_2d(X)) + self.eps_cluster[c] + self.eps_action


@dataclass(frozen=True, eq=False)
class FunctionRegressor:
    """Wraps ``fn(X) -> (n, n_actions)``; handy for fixtures and oracle models."""

    fn: Callable
    kind: str = "function"

    def predict(self, X) -> np.ndarray:
        return np.atleast_2d(self.fn(np.atleast_2d(np.asarray(X, dtype=float))))


def table_regressor(env, table) -> FunctionRegressor:
    """Regressor reading rows of ``table`` aligned with ``env.contexts``."""
    table = np.atleast_2d(np.asarray(table, dtype=float))
    index = {row.tobytes(): i for i, row in enumerate(np.atleast_2d(env.contexts))}
    return FunctionRegressor(lambda X: table[[index[r.tobytes()] for r in X]], kind="table")


def eval_regressor(f, x, a: int) -> float:
    return float(f.predict(np.atleast_2d(x))[0, a])


@dataclass(frozen=True, eq=False)
class PairDataset:
    contexts: np.ndarray
    a: np.ndarray
    b: np.ndarray
    r_a: np.ndarray
    r_b: np.ndarray

    def __len__(self) -> int:
        return len(self.a)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"ctx_{j}" for j in range(self.contexts.shape[1])] + ["a", "b", "r_a", "r_b"])
            for i in range(len(self)):
                w.writerow([repr(float(v)) for v in self.contexts[i]]
                           + [int(self.a[i]), int(self.b[i]), repr(float(self.r_a[i])), repr(float(self.r_b[i]))])


def build_pair_dataset(D: LoggedDataset, cm: ClusterMap) -> PairDataset:
    """All same-context, same-cluster record pairs with distinct actions, ``a < b``."""
    groups: dict = {}
    clusters = cm.assignment[D.actions]
    for i in range(len(D)):
        groups.setdefault((D.contexts[i].tobytes(), int(clusters[i])), []).append(i)
    ctx, aa, bb, ra, rb = [], [], [], [], []
    for idx in groups.values():
        for p in range(len(idx)):
            for q in range(p + 1, len(idx)):
                i, j = idx[p], idx[q]
                if D.actions[i] == D.actions[j]:
                    continue
                if D.actions[i] > D.actions[j]:
                    i, j = j, i
                ctx.append(D.contexts[i])
                aa.append(D.actions[i]); bb.append(D.actions[j])
                ra.append(D.rewards[i]); rb.append(D.rewards[j])
    d = D.contexts.shape[1]
    return PairDataset(
        np.array(ctx).reshape(len(ctx), d), np.array(aa, dtype=np.int64), np.array(bb, dtype=np.int64),
        np.array(ra, dtype=float), np.array(rb, dtype=float),
    )


def _minibatch_fit(net: Mlp, n: int, cfg: RegressionConfig, grad_fn) -> Mlp:
    """Minibatch Adam on a squared loss; ``grad_fn(idx, net)`` returns (X, upstream)."""
    hyper = AdamConfig(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    state = AdamState.zeros(net.n_params)
    params = net.params
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            X, U = grad_fn(idx, net)
            params, state = adam_step(params, net.param_gradient(X, U), state, hyper)
            net = net.with_params(params)
    return net


def fit_pairwise(P: PairDataset, config: RegressionConfig, n_actions: int,
                 init: Optional[Mlp] = None) -> NetRegressor:
    """Fit h so that h(x, a) - h(x, b) tracks r_a - r_b."""
    if len(P) == 0:
        raise FallbackNeeded("empty pair dataset")
    d = P.contexts.shape[1]
    net = init if init is not None else Mlp.init((d, *config.hidden, n_actions), config.seed)

    def grad_fn(idx, net):
        X = P.contexts[idx]
        H = net.forward(X)
        rows = np.arange(len(idx))
        resid = (H[rows, P.a[idx]] - H[rows, P.b[idx]]) - (P.r_a[idx] - P.r_b[idx])
        U = np.zeros_like(H)
        U[rows, P.a[idx]] += 2.0 * resid / len(idx)
        U[rows, P.b[idx]] -= 2.0 * resid / len(idx)
        return X, U

    return NetRegressor(_minibatch_fit(net, len(P), config, grad_fn), kind="pairwise")


def fit_baseline(D: LoggedDataset, h, config: RegressionConfig, cm: Optional[ClusterMap] = None,
                 init: Optional[Mlp] = None) -> BaselineRegressor:
    """Fit g(x, c_a) to the residual r - h(x, a)."""
    cm = D.cluster_map if cm is None else cm
    rows = np.arange(len(D))
    target = D.rewards - h.predict(D.contexts)[rows, D.actions]
    clusters = cm.assignment[D.actions]
    net = init if init is not None else Mlp.init((D.context_dim, *config.hidden, cm.n_clusters), config.seed + 1)

    def grad_fn(idx, net):
        X = D.contexts[idx]
        G = net.forward(X)
        r = np.arange(len(idx))
        U = np.zeros_like(G)
        U[r, clusters[idx]] = 2.0 * (G[r, clusters[idx]] - target[idx]) / len(idx)
        return X, U

    return BaselineRegressor(_minibatch_fit(net, len(D), config, grad_fn), cm)


def fit_conventional(D: LoggedDataset, config: RegressionConfig, n_actions: Optional[int] = None,
                     init: Optional[Mlp] = None) -> NetRegressor:
    n_actions = D.cluster_map.n_actions if n_actions is None else n_actions
    net = init if init is not None else Mlp.init((D.context_dim, *config.hidden, n_actions), config.seed + 2)

    def grad_fn(idx, net):
        X = D.contexts[idx]
        Q = net.forward(X)
        r = np.arange(len(idx))
        U = np.zeros_like(Q)
        U[r, D.actions[idx]] = 2.0 * (Q[r, D.actions[idx]] - D.rewards[idx]) / len(idx)
        return X, U

    return NetRegressor(_minibatch_fit(net, len(D), config, grad_fn), kind="conventional")


def f_cluster_expectation(f, second, x, c: int) -> float:
    X = np.atleast_2d(x)
    return float(second.cluster_expectation(X, f.predict(X))[0, c])


def local_correctness_residual(f, env, contexts, cm: Optional[ClusterMap] = None) -> float:
    """max over contexts and same-cluster pairs of |Delta_q - Delta_f|."""
    X = np.atleast_2d(contexts)
    err = env.q(X) - f.predict(X)
    cm = env.cluster_map if cm is None else cm
    worst = 0.0
    for c in range(cm.n_clusters):
        e = err[:, cm.members(c)]
        worst = max(worst, float(np.max(e.max(axis=1) - e.min(axis=1))))
    return worst
