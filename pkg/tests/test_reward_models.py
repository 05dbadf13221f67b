import numpy as np
import pytest
from hypothesis import given, strategies as st

from potec.bandit_env import ClusterMap, LoggedDataset, make_noisy_regression_model, sample_logged_data
from potec.errors import FallbackNeeded
from potec.policy import SecondStagePolicy
from potec.reward_models import (
    CombinedRegressor, PairDataset, RegressionConfig, build_pair_dataset, fit_baseline, fit_conventional,
    fit_pairwise, local_correctness_residual,
)
from potec.verification import ranking_fixture


def logged(contexts, actions, rewards, cm):
    contexts = np.asarray(contexts, dtype=float)
    actions = np.asarray(actions)
    return LoggedDataset(contexts, actions, cm.assignment[actions], np.asarray(rewards, dtype=float),
                         np.full(len(actions), 0.5), cm)


def test_pair_dataset_counts_same_context_same_cluster_pairs():
    cm = ClusterMap(np.array([0, 0, 0, 1]), 2)
    X = [[0.0]] * 4 + [[1.0]] * 2
    D = logged(X, [2, 0, 1, 3, 0, 3], [1, 2, 3, 4, 5, 6], cm)
    P = build_pair_dataset(D, cm)
    # context 0: actions 0,1,2 in cluster 0 -> 3 pairs; context 1: different clusters -> none
    assert len(P) == 3
    assert np.all(P.a < P.b)
    got = sorted(zip(P.a.tolist(), P.b.tolist(), P.r_a.tolist(), P.r_b.tolist()))
    assert got == [(0, 1, 2.0, 3.0), (0, 2, 2.0, 1.0), (1, 2, 3.0, 1.0)]


def test_pair_dataset_skips_repeated_action():
    cm = ClusterMap(np.array([0, 0]), 1)
    P = build_pair_dataset(logged([[0.0]] * 2, [1, 1], [0, 1], cm), cm)
    assert len(P) == 0


@given(st.integers(0, 1000))
def test_pair_invariants_on_sampled_data(seed):
    from potec.bandit_env import EnvConfig, build_synthetic_env

    env = build_synthetic_env(EnvConfig(n_actions=6, n_clusters=2, context_dim=2), seed)
    D = sample_logged_data(env, 60, seed, repeats_per_context=4)
    P = build_pair_dataset(D, env.cluster_map)
    a = env.cluster_map.assignment
    assert np.all(P.a < P.b) and np.all(a[P.a] == a[P.b])


def test_empty_pair_dataset_requests_fallback():
    empty = PairDataset(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0))
    with pytest.raises(FallbackNeeded):
        fit_pairwise(empty, RegressionConfig(), 3)


def test_pairwise_then_baseline_recovers_tabular_rewards():
    # one context, deterministic rewards q = (4, 1, 3, 2)
    cm = ClusterMap(np.array([0, 0, 1, 1]), 2)
    q = np.array([4.0, 1.0, 3.0, 2.0])
    actions = np.tile(np.arange(4), 50)
    D = logged(np.ones((200, 1)), actions, q[actions], cm)
    cfg = RegressionConfig(hidden=(8,), learning_rate=1e-2, weight_decay=0.0, batch_size=32, epochs=200)
    h = fit_pairwise(build_pair_dataset(D, cm), cfg, 4)
    assert local_correctness_residual(h, _Const(q, cm), np.ones((1, 1))) < 0.05
    f = CombinedRegressor(fit_baseline(D, h, cfg), h)
    np.testing.assert_allclose(f.predict(np.ones((1, 1)))[0], q, atol=0.05)
    conv = fit_conventional(D, cfg)
    np.testing.assert_allclose(conv.predict(np.ones((1, 1)))[0], q, atol=0.05)


class _Const:
    def __init__(self, q, cm):
        self._q, self.cluster_map = q, cm

    def q(self, X):
        return np.tile(self._q, (len(X), 1))


def test_fixture_models_are_locally_correct_with_same_argmax():
    env, models = ranking_fixture()
    for f in models.values():
        assert local_correctness_residual(f, env, env.contexts) == 0.0
        assert SecondStagePolicy(f, env.cluster_map).choices(env.contexts).tolist() == [[0, 2]]


@given(st.floats(0, 3), st.integers(0, 1000))
def test_cluster_noise_only_model_is_locally_correct(sigma_c, seed):
    from potec.bandit_env import EnvConfig, build_synthetic_env

    env = build_synthetic_env(EnvConfig(n_actions=9, n_clusters=3, context_dim=2), seed)
    f = make_noisy_regression_model(env, sigma_c, 0.0, seed)
    X = env.sample_contexts(5, np.random.default_rng(seed))
    assert local_correctness_residual(f, env, X) <= 1e-9


def test_action_noise_breaks_local_correctness(small_env):
    f = make_noisy_regression_model(small_env, 0.0, 1.0, 0)
    assert local_correctness_residual(f, small_env, np.zeros((1, 4))) > 0.1
