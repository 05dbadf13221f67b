"""Verification checks shared by the ``verify``/``gradcheck`` commands and the acceptance tests.

Every check returns a :class:`CheckResult`; ``scale`` lets the CLI run a
cheaper version of the Monte-Carlo checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .bandit_env import (
    ClusterMap,
    EnvConfig,
    LoggedDataset,
    TabularEnvironment,
    build_synthetic_env,
    make_noisy_regression_model,
    restrict_support,
    sample_logged_data,
)
from .func_approx import Mlp
from .grad_estimators import ActionSelector, dr_pg, ips_pg, potec_one_stage_pg, potec_pg, sips_pg
from .oracle_analysis import (
    bootstrap_trace_gap_se,
    cluster_value,
    dr_variance_closed_form,
    exhaustive_moments,
    make_estimator,
    monte_carlo_moments,
    potec_bias_closed_form,
    potec_variance_closed_form,
    record_law,
    replicate_gradients,
    trace_covariance,
    true_gradient,
)
from .policy import OverallPolicy, SecondStagePolicy, SoftmaxPolicy, UniformSecondStage
from .reward_models import FunctionRegressor, local_correctness_residual, table_regressor

DESK_OFFSET = 10.0


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    metrics: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.criterion:>2} {self.name}: {self.detail}"


# --- fixtures --------------------------------------------------------------------

def ranking_fixture():
    """One context, four actions in two clusters, and three locally correct models."""
    env = TabularEnvironment(np.zeros((1, 1)), np.array([[4.0, 1.0, 3.0, 2.0]]), ClusterMap(np.array([0, 0, 1, 1]), 2))
    models = {
        "f1": table_regressor(env, [[3.0, 0.0, 1.0, 0.0]]),
        "f2": table_regressor(env, [[50.0, 47.0, -30.0, -31.0]]),
        "f3": table_regressor(env, env.q_table),
    }
    return env, models


def cluster_value_fixture():
    return TabularEnvironment(np.zeros((1, 1)), np.array([[4.0, 2.0, 5.0, 0.0]]), ClusterMap(np.array([0, 0, 1, 1]), 2))


def oracle_instance(seed=0, n_contexts=5, n_actions=20, n_clusters=4, context_dim=3, hidden=(2,)):
    """Discrete-context env plus a small first stage and a fixed second stage."""
    cfg = EnvConfig(n_actions=n_actions, n_clusters=n_clusters, context_dim=context_dim,
                    n_discrete_contexts=n_contexts)
    env = build_synthetic_env(cfg, [seed, 0])
    first = SoftmaxPolicy.init(context_dim, n_clusters, hidden=hidden, seed=[seed, 1], outcome_space="clusters")
    scorer = make_noisy_regression_model(env, 0.0, 0.7, [seed, 2])
    return env, OverallPolicy(first, SecondStagePolicy(scorer, env.cluster_map))


def desk_env_config(**kw) -> EnvConfig:
    base = dict(n_actions=500, n_clusters=10, reward_offset=DESK_OFFSET)
    base.update(kw)
    return EnvConfig(**base)


# --- criterion 1 ------------------------------------------------------------------

def check_reductions(n_instances: int = 20, seed=0, tol: float = 1e-12) -> CheckResult:
    worst = {"dr0_vs_ips": 0.0, "sips1_vs_ips": 0.0, "potec_vs_dr": 0.0, "potec1_vs_dr": 0.0}
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        A = int(rng.integers(3, 13))
        d = int(rng.integers(2, 5))
        env = build_synthetic_env(EnvConfig(n_actions=A, n_clusters=A, context_dim=d), [seed, i, 0])
        D = sample_logged_data(env, int(rng.integers(5, 60)), [seed, i, 1])
        p = SoftmaxPolicy.init(d, A, hidden=(int(rng.integers(2, 6)),), seed=[seed, i, 2])
        q_hat = make_noisy_regression_model(env, 0.5, 0.5, [seed, i, 3])
        zero = FunctionRegressor(lambda X, A=A: np.zeros((len(X), A)))
        cm = ClusterMap.singletons(A)
        ips = ips_pg(D, p)
        dr = dr_pg(D, p, q_hat)
        pi0 = env.logging_probs(D.contexts)
        first = replace(p, outcome_space="clusters")
        second = SecondStagePolicy(q_hat, cm)
        diffs = {
            "dr0_vs_ips": dr_pg(D, p, zero) - ips,
            "sips1_vs_ips": sips_pg(D, p, ActionSelector(q_hat, 1.0)) - ips,
            "potec_vs_dr": potec_pg(D, first, second, q_hat, cm, pi0) - dr,
            "potec1_vs_dr": potec_one_stage_pg(D, p, q_hat, cm, pi0) - dr,
        }
        for k, v in diffs.items():
            worst[k] = max(worst[k], float(np.max(np.abs(v))))
    ok = all(v <= tol for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol {tol:g}, {n_instances} instances)"
    return CheckResult(1, "reduction identities", ok, detail, worst)


# --- criterion 2 ------------------------------------------------------------------

def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_gradients(n_cases: int = 100, seed=0, step: float = 1e-6, tol: float = 1e-5) -> CheckResult:
    worst_mlp = worst_score = 0.0
    for i in range(n_cases):
        rng = np.random.default_rng([seed, i])
        sizes = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(2, 5))))
        net = Mlp(sizes, rng.normal(0, 0.8, Mlp.zeros(sizes).n_params))
        X = rng.standard_normal((int(rng.integers(1, 4)), sizes[0]))
        U = rng.standard_normal((len(X), sizes[-1]))
        g = net.param_gradient(X, U)
        fd = np.empty_like(g)
        for j in range(len(g)):
            e = np.zeros_like(g)
            e[j] = step
            fd[j] = (np.sum(U * net.with_params(net.params + e).forward(X))
                     - np.sum(U * net.with_params(net.params - e).forward(X))) / (2 * step)
        worst_mlp = max(worst_mlp, _rel_err(g, fd))

        K = int(rng.integers(2, 6))
        d = int(rng.integers(1, 4))
        pol = SoftmaxPolicy(Mlp.init((d, int(rng.integers(1, 5)), K), [seed, i]),
                            temperature=float(rng.uniform(0.5, 2.0)))
        x = rng.standard_normal(d)
        k = int(rng.integers(0, K))
        s = pol.score(x, k)
        fd = np.empty_like(s)
        for j in range(len(s)):
            e = np.zeros_like(s)
            e[j] = step
            fd[j] = (math.log(pol.with_params(pol.params + e).probs(x)[k])
                     - math.log(pol.with_params(pol.params - e).probs(x)[k])) / (2 * step)
        worst_score = max(worst_score, _rel_err(s, fd))
    ok = worst_mlp <= tol and worst_score <= tol
    detail = f"max rel err mlp {worst_mlp:.2e}, score {worst_score:.2e} over {n_cases} cases (tol {tol:g})"
    return CheckResult(2, "gradient correctness", ok, detail, {"mlp": worst_mlp, "score": worst_score})


# --- criteria 3-5 -----------------------------------------------------------------

def check_unbiasedness(n_replications: int = 100_000, n: int = 50, seed=0) -> CheckResult:
    env, overall = oracle_instance(seed)
    f = make_noisy_regression_model(env, 1.0, 0.0, [seed, 3])
    est = make_estimator("potec", overall, env, f)
    truth = true_gradient(env, overall)
    mean, _ = exhaustive_moments(est, env)
    exact_err = float(np.max(np.abs(mean - truth)))
    rep = monte_carlo_moments(est, env, n, n_replications, [seed, 4], truth=truth)
    z = float(np.max(rep.bias_z_scores()))
    ok = exact_err <= 1e-10 and z <= 3.0
    detail = (f"exhaustive-true max {exact_err:.1e} (tol 1e-10); MC max |bias|/SE {z:.2f} over "
              f"{len(truth)} components, {n_replications}x n={n} (tol 3)")
    return CheckResult(3, "POTEC unbiasedness", ok, detail, {"exact_err": exact_err, "max_z": z})


def check_bias_oracle(n_replications: int = 100_000, n: int = 50, seed=0) -> CheckResult:
    env, overall = oracle_instance(seed)
    f = make_noisy_regression_model(env, 1.0, 0.5, [seed, 5])
    resid = local_correctness_residual(f, env, env.contexts)
    est = make_estimator("potec", overall, env, f)
    truth = true_gradient(env, overall)
    closed = potec_bias_closed_form(env, overall, f)
    mean, _ = exhaustive_moments(est, env)
    exact_err = float(np.max(np.abs((mean - truth) - closed)))
    rep = monte_carlo_moments(est, env, n, n_replications, [seed, 6], truth=truth)
    z = float(np.max(np.abs(rep.mc_bias - closed) / rep.mc_std_errors))
    z_zero = float(np.max(rep.bias_z_scores()))
    ok = exact_err <= 1e-10 and z <= 3.0
    detail = (f"closed-form vs exhaustive bias max {exact_err:.1e} (tol 1e-10); MC bias vs closed form "
              f"max z {z:.2f} (tol 3); MC bias vs 0 max z {z_zero:.1f}; |bias| {np.linalg.norm(closed):.3g}, "
              f"local-correctness residual {resid:.3g}")
    return CheckResult(4, "bias oracle", ok, detail, {"exact_err": exact_err, "max_z": z, "z_vs_zero": z_zero})


def check_variance_oracles(n_replications: int = 100_000, n: int = 1, seed=0, rel: float = 0.05) -> CheckResult:
    env, overall = oracle_instance(seed)
    f = make_noisy_regression_model(env, 1.0, 0.0, [seed, 3])
    p = SoftmaxPolicy.init(env.context_dim, env.n_actions, hidden=(2,), seed=[seed, 7])
    q_hat = make_noisy_regression_model(env, 0.3, 0.3, [seed, 8])
    zero = FunctionRegressor(lambda X: np.zeros((len(X), env.n_actions)))
    law = record_law(env)
    cases = {
        "potec": (make_estimator("potec", overall, env, f), potec_variance_closed_form(env, overall, f)),
        "dr": (make_estimator("dr", p, env, q_hat), dr_variance_closed_form(env, p, q_hat)),
        "ips": (make_estimator("ips", p, env), dr_variance_closed_form(env, p, zero)),
    }
    parts, metrics, ok = [], {}, True
    for k, (est, closed) in cases.items():
        _, exhaustive = exhaustive_moments(est, env, law)
        rep = monte_carlo_moments(est, env, n, n_replications, [seed, 9, len(parts)])
        exact_err = abs(exhaustive - closed)
        mc_rel = abs(rep.mc_variance_trace - closed) / closed
        ok &= exact_err <= 1e-10 and mc_rel <= rel
        metrics[k] = {"closed": closed, "exact_err": exact_err, "mc": rep.mc_variance_trace, "mc_rel": mc_rel}
        parts.append(f"{k} closed {closed:.4g} exact err {exact_err:.1e} MC rel {mc_rel:.3f}")
    detail = "; ".join(parts) + f" (tol 1e-10 / {rel:.0%}, {n_replications}x n={n})"
    return CheckResult(5, "variance oracles", bool(ok), detail, metrics)


# --- criterion 6 ------------------------------------------------------------------

def check_fixtures() -> CheckResult:
    env, models = ranking_fixture()
    parts, ok = [], True
    for name, f in models.items():
        resid = local_correctness_residual(f, env, env.contexts)
        choice = tuple(int(a) for a in SecondStagePolicy(f, env.cluster_map).choices(env.contexts)[0])
        ok &= resid == 0.0 and choice == (0, 2)
        parts.append(f"{name} residual {resid:g} argmax {choice}")
    env2 = cluster_value_fixture()
    opt = SecondStagePolicy(FunctionRegressor(env2.q), env2.cluster_map)
    uni = UniformSecondStage(env2.cluster_map)
    v_opt = tuple(cluster_value(env2, opt, env2.contexts[0], c) for c in range(2))
    v_uni = tuple(cluster_value(env2, uni, env2.contexts[0], c) for c in range(2))
    ok &= v_opt == (4.0, 5.0) and v_uni == (3.0, 2.5)
    parts.append(f"cluster values optimal {v_opt} uniform {v_uni}")
    return CheckResult(6, "fixture tables", bool(ok), "; ".join(parts))


# --- criterion 7 ------------------------------------------------------------------

def check_variance_ordering(n_replications: int = 1000, n: int = 1000, seed=0, n_boot: int = 1000) -> CheckResult:
    env = build_synthetic_env(desk_env_config(), [seed, 0])
    model = make_noisy_regression_model(env, 0.5, 0.5, [seed, 1])
    first = SoftmaxPolicy.init(env.context_dim, env.n_clusters, seed=[seed, 2], outcome_space="clusters")
    overall = OverallPolicy(first, SecondStagePolicy(model, env.cluster_map))
    ests = {k: make_estimator(k, overall, env, model) for k in ("potec", "dr", "ips")}
    G = replicate_gradients(ests, env, n, n_replications, [seed, 3])
    tr = {k: trace_covariance(v) for k, v in G.items()}
    se_pd = bootstrap_trace_gap_se(G["dr"], G["potec"], n_boot, [seed, 4])
    se_di = bootstrap_trace_gap_se(G["ips"], G["dr"], n_boot, [seed, 5])
    gap_pd, gap_di = tr["dr"] - tr["potec"], tr["ips"] - tr["dr"]
    ok = gap_pd >= 2 * se_pd and gap_di >= 2 * se_di
    detail = (f"trace cov POTEC {tr['potec']:.4g} < DR {tr['dr']:.4g} < IPS {tr['ips']:.4g}; "
              f"gaps/SE {gap_pd / se_pd:.1f}, {gap_di / se_di:.1f} (need >= 2), {n_replications} reps n={n}")
    return CheckResult(7, "variance ordering", bool(ok), detail, {**tr, "z_potec_dr": gap_pd / se_pd,
                                                                 "z_dr_ips": gap_di / se_di})


# --- criterion 11 -----------------------------------------------------------------

def check_support_deficiency(n_replications: int = 100_000, n: int = 50, seed=0) -> CheckResult:
    env, overall = oracle_instance(seed)
    env = restrict_support(env, env.n_actions // 5, [seed, 10])
    f = make_noisy_regression_model(env, 1.0, 0.0, [seed, 3])
    truth = true_gradient(env, overall)
    reps = {}
    for k in ("ips", "potec"):
        est = make_estimator(k, overall, env, f)
        reps[k] = monte_carlo_moments(est, env, n, n_replications, [seed, 11, len(reps)], truth=truth)
    z_ips = float(np.max(reps["ips"].bias_z_scores()))
    z_potec = float(np.max(reps["potec"].bias_z_scores()))
    ok = z_ips > 3.0 and z_potec <= 3.0
    detail = (f"max |bias|/SE IPS {z_ips:.1f} (need > 3), POTEC {z_potec:.2f} (need <= 3); "
              f"{int((~env.supported).sum())} of {env.n_actions} actions unsupported")
    return CheckResult(11, "support deficiency", bool(ok), detail, {"z_ips": z_ips, "z_potec": z_potec})


ORACLE_CHECKS: dict[str, Callable[..., CheckResult]] = {
    "reductions": check_reductions,
    "fixtures": check_fixtures,
    "unbiasedness": check_unbiasedness,
    "bias": check_bias_oracle,
    "variance": check_variance_oracles,
    "ordering": check_variance_ordering,
    "support": check_support_deficiency,
}


def run_oracle_suite(scale: float = 1.0) -> list[CheckResult]:
    """Oracle checks; ``scale`` < 1 shrinks Monte-Carlo replication counts."""
    reps = max(2000, int(100_000 * scale))
    return [
        check_reductions(),
        check_fixtures(),
        check_unbiasedness(reps),
        check_bias_oracle(reps),
        check_variance_oracles(reps),
        check_variance_ordering(max(50, int(1000 * scale))),
        check_support_deficiency(reps),
    ]


# --- criteria 8-10: desk-scale sweeps ------------------------------------------------

def desk_spec(**kw):
    """n=2000, |A|=500, |C|=10; baselines tuned on test value over lr (and fraction for IPS)."""
    from .experiment import SweepSpec
    from .trainer import TrainConfig

    train = TrainConfig(weight_decay_grid=(1e-4,), batch_size_grid=(128,), eval_every=50)
    base = dict(param="n", values=(2000,), methods=("potec", "reg_based", "ips", "dr"), n_seeds=10,
                env=desk_env_config(), train=train, n=2000)
    base.update(kw)
    return SweepSpec(**base)


def _values(rows, method, value=None) -> np.ndarray:
    got = sorted((r.seed, r.normalized_value) for r in rows
                 if r.method == method and (value is None or r.value == value) and r.status == "ok")
    return np.array([v for _, v in got])


def _spearman(x, y) -> float:
    rx, ry = np.argsort(np.argsort(x)), np.argsort(np.argsort(y))
    if np.std(ry) == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])


def check_method_comparison(n_seeds: int = 10, jobs: int = 1, master_seed: int = 0) -> CheckResult:
    from dataclasses import replace as _replace

    from .experiment import run_sweep

    spec = desk_spec(n_seeds=n_seeds, master_seed=master_seed)
    rows = run_sweep(spec, jobs=jobs)
    curve = run_sweep(_replace(spec, values=(500, 1000, 2000), methods=("potec",)), jobs=jobs)
    means = {m: float(_values(rows, m).mean()) for m in spec.methods}
    beats = all(means["potec"] > means[m] for m in ("reg_based", "ips", "dr"))
    trend = np.array([_values(curve, "potec", v) for v in (500, 1000, 2000)])  # (3, seeds)
    rho = [_spearman([500, 1000, 2000], trend[:, s]) for s in range(trend.shape[1])]
    n_pos = int(sum(r > 0 for r in rho))
    need = math.ceil(0.8 * n_seeds)
    ok = beats and n_pos >= need
    detail = (", ".join(f"{m} {v:.3f}" for m, v in means.items())
              + f"; POTEC trend in n positive in {n_pos}/{n_seeds} seeds (need {need})")
    return CheckResult(8, "desk-scale method comparison", ok, detail, {"means": means, "rho": rho})


def check_cluster_noise(n_seeds: int = 10, jobs: int = 1, master_seed: int = 0, noise: float = 0.3) -> CheckResult:
    from .experiment import run_sweep

    spec = desk_spec(param="cluster_noise", values=(noise,), methods=("potec", "ips", "dr"), n_seeds=n_seeds,
                     master_seed=master_seed)
    rows = run_sweep(spec, jobs=jobs)
    v = {m: _values(rows, m) for m in spec.methods}
    means = {m: float(x.mean()) for m, x in v.items()}
    wins = int(np.sum((v["potec"] > v["ips"]) & (v["potec"] > v["dr"])))
    need = math.ceil(0.8 * n_seeds)
    ok = means["potec"] > means["ips"] and means["potec"] > means["dr"] and wins >= need
    detail = (", ".join(f"{m} {x:.3f}" for m, x in means.items())
              + f"; POTEC beats both in {wins}/{n_seeds} seeds (need {need})")
    return CheckResult(9, "cluster-noise robustness", ok, detail, {"means": means, "wins": wins})


def check_model_noise(n_seeds: int = 10, jobs: int = 1, master_seed: int = 0, sigma_c: float = 0.5) -> CheckResult:
    from .experiment import run_sweep

    spec = desk_spec(param="sigma_c", values=(0.0, sigma_c), sigma_a=0.0, methods=("potec", "reg_based"),
                     n_seeds=n_seeds, master_seed=master_seed)
    rows = run_sweep(spec, jobs=jobs)
    drop = {}
    for m in spec.methods:
        clean, noisy = _values(rows, m, 0.0).mean(), _values(rows, m, sigma_c).mean()
        drop[m] = float((clean - noisy) / clean)
    ok = drop["potec"] < 0.05 and drop["reg_based"] > 0.05
    detail = (f"relative drop sigma_c 0 -> {sigma_c}: POTEC {drop['potec']:.2%} (need < 5%), "
              f"Reg-based {drop['reg_based']:.2%} (need > 5%)")
    return CheckResult(10, "reward-model noise robustness", ok, detail, {"drop": drop})
