import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import fd_gradient
from potec.bandit_env import ClusterMap
from potec.errors import ContractViolation
from potec.func_approx import Mlp
from potec.policy import (
    OverallPolicy, RegressionPolicy, SecondStagePolicy, SoftmaxPolicy, UniformSecondStage, cluster_marginal,
    second_stage_choice,
)
from potec.reward_models import FunctionRegressor


def make_overall(seed, A=7, C=3, d=2):
    rng = np.random.default_rng(seed)
    cm = ClusterMap(np.arange(A) % C, C)
    W = rng.standard_normal((d, A))
    second = SecondStagePolicy(FunctionRegressor(lambda X: X @ W), cm)
    first = SoftmaxPolicy.init(d, C, hidden=(3,), seed=seed, outcome_space="clusters")
    return OverallPolicy(first, second), rng.standard_normal((4, d))


@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_softmax_probs_are_a_simplex(seed, tau):
    p = SoftmaxPolicy(Mlp.init((3, 4, 6), seed), temperature=tau)
    P = p.probs(np.random.default_rng(seed).normal(0, 5, (5, 3)))
    assert np.all(P >= 0) and np.max(np.abs(P.sum(axis=1) - 1)) <= 1e-12


def test_extreme_logits_stay_finite():
    net = Mlp((1, 3), np.array([1e4, 0.0, -1e4, 0.0, 0.0, 0.0]))
    P = SoftmaxPolicy(net).probs(np.array([[1.0]]))
    assert np.all(np.isfinite(P))
    np.testing.assert_allclose(P[0], [1.0, 0.0, 0.0], atol=1e-12)


@given(st.integers(0, 10_000))
def test_prob_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = SoftmaxPolicy(Mlp.init((2, 3, 4), seed), temperature=0.7)
    X, V = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    fd = fd_gradient(lambda th: float(np.sum(V * p.with_params(th).probs(X))), p.params)
    np.testing.assert_allclose(p.prob_gradient(X, V), fd, atol=1e-7)


@given(st.integers(0, 10_000))
def test_expected_score_is_zero(seed):
    p = SoftmaxPolicy(Mlp.init((2, 3, 4), seed))
    x = np.random.default_rng(seed).standard_normal(2)
    pi = p.probs(x)
    total = sum(pi[k] * p.score(x, k) for k in range(4))
    assert np.max(np.abs(total)) <= 1e-12


def test_score_matches_log_prob_differences():
    p = SoftmaxPolicy(Mlp.init((2, 3, 4), 5))
    x = np.array([0.3, -1.2])
    fd = fd_gradient(lambda th: math.log(p.with_params(th).probs(x)[2]), p.params)
    np.testing.assert_allclose(p.score(x, 2), fd, atol=1e-7)
    with pytest.raises(ContractViolation):
        p.score(x, 4)


def test_jacobians_agree_with_prob_gradient():
    p = SoftmaxPolicy(Mlp.init((2, 3, 4), 1))
    X = np.random.default_rng(1).standard_normal((3, 2))
    J, S = p.prob_jacobian(X), p.score_jacobian(X)
    np.testing.assert_allclose(J, p.probs(X)[:, :, None] * S, atol=1e-12)
    np.testing.assert_allclose(J[1, 2], p.prob_gradient(X[1:2], np.eye(4)[2][None]), atol=1e-12)


@given(st.integers(0, 10_000))
def test_overall_policy_is_a_simplex_with_one_action_per_cluster(seed):
    o, X = make_overall(seed)
    P = o.probs(X)
    assert np.max(np.abs(P.sum(axis=1) - 1)) <= 1e-12
    assert np.all((P > 0).sum(axis=1) <= 3)
    np.testing.assert_allclose(cluster_marginal(P, o.second.cluster_map), o.first.probs(X), atol=1e-12)


@given(st.integers(0, 10_000))
def test_overall_prob_gradient_matches_finite_differences(seed):
    o, X = make_overall(seed)
    V = np.random.default_rng(seed + 1).standard_normal((len(X), 7))
    fd = fd_gradient(lambda th: float(np.sum(V * o.with_params(th).probs(X))), o.first.params)
    np.testing.assert_allclose(o.prob_gradient(X, V), fd, atol=1e-7)
    np.testing.assert_allclose(np.einsum("ik,ikp->p", V, o.prob_jacobian(X)), o.prob_gradient(X, V), atol=1e-12)


def test_second_stage_picks_in_cluster_argmax_with_low_index_ties():
    cm = ClusterMap(np.array([0, 0, 1, 1, 1]), 2)
    s = SecondStagePolicy(FunctionRegressor(lambda X: np.tile([1.0, 1.0, 0.0, 2.0, 2.0], (len(X), 1))), cm)
    assert s.choices(np.zeros((1, 1))).tolist() == [[0, 3]]
    assert second_stage_choice(s, np.zeros(1), 1) == 3
    with pytest.raises(ContractViolation):
        second_stage_choice(s, np.zeros(1), 2)


def test_uniform_second_stage_routes_evenly():
    cm = ClusterMap(np.array([0, 0, 1]), 2)
    P = UniformSecondStage(cm).route(None, np.array([[0.4, 0.6]]))
    np.testing.assert_allclose(P, [[0.2, 0.2, 0.6]])


def test_sample_action_follows_first_stage():
    o, X = make_overall(3)
    rng = np.random.default_rng(0)
    draws = [o.sample_action(X[0], rng) for _ in range(4000)]
    ch = o.second.choices(X[:1])[0]
    assert all(a == ch[c] for c, a in draws)
    freq = np.bincount([c for c, _ in draws], minlength=3) / 4000
    np.testing.assert_allclose(freq, o.first.probs(X[0]), atol=0.03)


def test_regression_policy_temperature_limits():
    reg = FunctionRegressor(lambda X: np.tile([1.0, 3.0, 2.0], (len(X), 1)))
    np.testing.assert_allclose(RegressionPolicy(reg, 1e-3).probs(np.zeros((1, 1))), [[0, 1, 0]], atol=1e-12)
    np.testing.assert_allclose(RegressionPolicy(reg, 1e6).probs(np.zeros((1, 1))), [[1 / 3] * 3], atol=1e-5)


def test_bad_outcome_space_rejected():
    with pytest.raises(ContractViolation):
        SoftmaxPolicy(Mlp.init((1, 2), 0), outcome_space="items")
