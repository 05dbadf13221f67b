import numpy as np
import pytest

from potec.bandit_env import EnvConfig, build_synthetic_env, make_noisy_regression_model, restrict_support
from potec.errors import ConfigurationError, UnsupportedModeError
from potec.oracle_analysis import (
    bootstrap_trace_gap_se, cluster_value, dr_variance_closed_form, exhaustive_moments, make_estimator,
    monte_carlo_moments, potec_bias_closed_form, potec_variance_closed_form, potec_variance_terms,
    record_law, trace_covariance, true_gradient, within_relative,
)
from potec.policy import OverallPolicy, SecondStagePolicy, SoftmaxPolicy, UniformSecondStage
from potec.reward_models import FunctionRegressor, table_regressor
from potec.verification import oracle_instance, ranking_fixture, cluster_value_fixture


@pytest.fixture(scope="module")
def oracle():
    env, overall = oracle_instance(0)
    return env, overall, make_noisy_regression_model(env, 1.0, 0.0, [0, 3])


def test_record_law_is_a_distribution(oracle):
    law = record_law(oracle[0])
    assert law.prob.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(law.prob > 0)


def test_locally_correct_potec_is_exactly_unbiased(oracle):
    env, overall, f = oracle
    mean, _ = exhaustive_moments(make_estimator("potec", overall, env, f), env)
    assert np.max(np.abs(mean - true_gradient(env, overall))) <= 1e-10
    assert np.max(np.abs(potec_bias_closed_form(env, overall, f))) <= 1e-12


def test_bias_closed_form_matches_enumeration(oracle):
    env, overall, _ = oracle
    f = make_noisy_regression_model(env, 1.0, 0.5, [0, 5])
    mean, _ = exhaustive_moments(make_estimator("potec", overall, env, f), env)
    closed = potec_bias_closed_form(env, overall, f)
    assert np.max(np.abs(mean - true_gradient(env, overall) - closed)) <= 1e-10
    # frozen from the enumeration route
    assert np.linalg.norm(closed) == pytest.approx(0.2331440797210082, rel=1e-9)


def test_bias_hand_computed_on_ranking_fixture():
    # f = 0 on the ranking fixture: uniform logging estimates cluster values 2.5 and 2.5
    # while the argmax second stage earns 4 and 3, so the per-cluster bias is (-1.5, -0.5)
    env, models = ranking_fixture()
    zero = table_regressor(env, [[0.0] * 4])
    first = SoftmaxPolicy.init(1, 2, hidden=(2,), seed=3, outcome_space="clusters")
    overall = OverallPolicy(first, SecondStagePolicy(models["f3"], env.cluster_map))
    expected = first.prob_gradient(env.contexts, np.array([[-1.5, -0.5]]))
    np.testing.assert_allclose(potec_bias_closed_form(env, overall, zero), expected, atol=1e-14)


def test_variance_closed_forms_match_enumeration(oracle):
    env, overall, f = oracle
    law = record_law(env)
    closed = potec_variance_closed_form(env, overall, f)
    assert closed == pytest.approx(5.637790154439832, rel=1e-9)
    assert potec_variance_terms(env, overall, f).total == closed
    _, ex = exhaustive_moments(make_estimator("potec", overall, env, f), env, law)
    assert abs(ex - closed) <= 1e-10
    p = SoftmaxPolicy.init(env.context_dim, env.n_actions, hidden=(2,), seed=[0, 7])
    q_hat = make_noisy_regression_model(env, 0.3, 0.3, [0, 8])
    closed = dr_variance_closed_form(env, p, q_hat)
    assert closed == pytest.approx(4.909450673608021, rel=1e-9)
    _, ex = exhaustive_moments(make_estimator("dr", p, env, q_hat), env, law)
    assert abs(ex - closed) <= 1e-10
    zero = FunctionRegressor(lambda X: np.zeros((len(X), env.n_actions)))
    _, ex = exhaustive_moments(make_estimator("ips", p, env), env, law)
    assert abs(ex - dr_variance_closed_form(env, p, zero)) <= 1e-10


def test_monte_carlo_agrees_with_closed_form(oracle):
    env, overall, f = oracle
    est = make_estimator("potec", overall, env, f)
    truth = true_gradient(env, overall)
    rep = monte_carlo_moments(est, env, 5, 4000, 1, truth=truth)
    assert rep.bias_within(4.0)
    assert within_relative(rep.mc_variance_trace, potec_variance_closed_form(env, overall, f), 0.1)


def test_monte_carlo_chunking_is_invisible_for_same_chunk_size(oracle):
    env, overall, f = oracle
    est = make_estimator("potec", overall, env, f)
    a = monte_carlo_moments(est, env, 3, 50, 2, keep_replicates=True)
    b = monte_carlo_moments(est, env, 3, 50, 2, keep_replicates=True)
    assert np.array_equal(a.replicates, b.replicates)
    # the streaming merge equals a direct computation
    c = monte_carlo_moments(est, env, 3, 50, 2, chunk_records=30, keep_replicates=True)
    np.testing.assert_allclose(c.mc_mean, c.replicates.mean(axis=0), atol=1e-12)
    assert c.mc_variance_trace == pytest.approx(3 * trace_covariance(c.replicates), rel=1e-10)


def test_report_csv(tmp_path, oracle):
    env, overall, f = oracle
    rep = monte_carlo_moments(make_estimator("potec", overall, env, f), env, 2, 20, 0,
                              truth=true_gradient(env, overall))
    rep.to_csv(tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == len(rep.mc_mean) + 1
    assert "replications" in rep.summary()


def test_ips_biased_without_full_support(oracle):
    env, overall, f = oracle
    env = restrict_support(env, 4, [0, 10])
    mean, _ = exhaustive_moments(make_estimator("ips", overall, env), env)
    truth = true_gradient(env, overall)
    assert np.max(np.abs(mean - truth)) > 1e-3
    mean, _ = exhaustive_moments(make_estimator("potec", overall, env, f), env)
    assert np.max(np.abs(mean - truth)) <= 1e-10


def test_fixture_cluster_values():
    env = cluster_value_fixture()
    opt = SecondStagePolicy(FunctionRegressor(env.q), env.cluster_map)
    uni = UniformSecondStage(env.cluster_map)
    assert [cluster_value(env, opt, env.contexts[0], c) for c in (0, 1)] == [4.0, 5.0]
    assert [cluster_value(env, uni, env.contexts[0], c) for c in (0, 1)] == [3.0, 2.5]


def test_continuous_env_rejected_by_exact_oracles(small_env):
    p = SoftmaxPolicy.init(4, 12, hidden=(2,), seed=0)
    with pytest.raises(UnsupportedModeError):
        record_law(small_env)
    with pytest.raises(UnsupportedModeError):
        dr_variance_closed_form(small_env, p, small_env)


def test_make_estimator_requirements(oracle):
    env, overall, f = oracle
    with pytest.raises(ConfigurationError):
        make_estimator("dr", overall.first)
    with pytest.raises(ConfigurationError):
        make_estimator("potec", overall.first, env, f)
    with pytest.raises(ConfigurationError):
        make_estimator("snips", overall)


def test_bootstrap_gap_se_is_small_for_identical_inputs():
    G = np.random.default_rng(0).standard_normal((200, 5))
    assert bootstrap_trace_gap_se(G, G, 50, 0) == 0.0
    assert bootstrap_trace_gap_se(3 * G, G, 200, 0) > 0.0
