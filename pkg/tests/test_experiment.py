import math

import numpy as np
import pytest
from dataclasses import replace

from potec import serialize
from potec.bandit_env import EnvConfig, build_synthetic_env, load_toml, sample_logged_data
from potec.cli import default_spec, main, render_template
from potec.errors import ConfigurationError
from potec.experiment import (
    ResultRow, SweepSpec, bootstrap_mean_ci, cell_seeds, read_rows, run_cell, run_sweep, spec_from_document,
    spec_to_document, summarize, write_rows,
)
from potec.reward_models import RegressionConfig
from potec.trainer import TrainConfig, ValueEvaluator, run_potec

TINY = SweepSpec(
    param="n", values=(60, 90), methods=("potec", "reg_based", "ips"), n_seeds=2,
    env=EnvConfig(n_actions=8, n_clusters=2, context_dim=3, reward_offset=10.0),
    train=TrainConfig(epochs=2, policy_hidden=(4,), regression=RegressionConfig(hidden=(4,), epochs=2),
                      learning_rate_grid=(1e-3,), weight_decay_grid=(1e-4,), batch_size_grid=(32,),
                      fraction_grid=(1.0,), temperature_grid=(0.1, 1.0)),
    n_test=200,
)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        replace(TINY, param="gamma").validate()
    with pytest.raises(ConfigurationError):
        replace(TINY, methods=("potec", "snips")).validate()
    with pytest.raises(ConfigurationError):
        replace(TINY, values=()).validate()


def test_seeds_separate_env_from_value():
    a, b = cell_seeds(0, 1, 60), cell_seeds(0, 1, 90)
    assert a["env"] == b["env"] and a["test"] == b["test"]
    assert a["data"] != b["data"]
    assert cell_seeds(0, 2, 60)["env"] != a["env"]


def test_sweep_rows_and_normalization(tmp_path):
    rows = run_sweep(TINY, tmp_path)
    assert len(rows) == 2 * 2 * 3
    assert all(r.status == "ok" for r in rows)
    for r in rows:
        assert r.normalized_value == pytest.approx(r.raw_value / r.logging_value)
    assert {r.tuning for r in rows if r.method == "potec"} == {"fixed"}
    assert {r.tuning for r in rows if r.method != "potec"} == {"oracle-tuned"}
    back = read_rows(tmp_path / "results.csv")
    assert [r.as_list() for r in back] == [r.as_list() for r in rows]
    assert (tmp_path / "summary.csv").exists()


def test_sweep_is_byte_deterministic_across_jobs(tmp_path):
    run_sweep(TINY, tmp_path / "a")
    run_sweep(TINY, tmp_path / "b", jobs=2)
    for name in ("results.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_failed_cell_is_recorded_not_raised():
    bad = replace(TINY, env=replace(TINY.env, reward_offset=-100.0), values=(60,), n_seeds=1)
    rows = run_cell(bad, 60, 0)
    assert all(r.status == "failed" and "not positive" in r.error for r in rows)
    assert summarize(rows) == []


def test_bootstrap_ci_brackets_mean():
    x = np.random.default_rng(0).normal(1.0, 0.1, 30)
    lo, hi = bootstrap_mean_ci(x, 0.95, 2000, 0)
    assert lo < x.mean() < hi
    assert bootstrap_mean_ci(x, 0.95, 2000, 0) == (lo, hi)
    assert bootstrap_mean_ci(np.full(5, 2.0)) == (2.0, 2.0)


def test_summary_groups(tmp_path):
    rows = [ResultRow("potec", "n", 10, s, 1.0 + s, 1.0, 1.0, "fixed") for s in range(3)]
    rows.append(ResultRow("potec", "n", 10, 3, math.nan, math.nan, 1.0, "fixed", "failed", "boom"))
    (s,) = summarize(rows)
    assert s["n_seeds"] == 3 and s["mean"] == pytest.approx(2.0)
    write_rows(rows, tmp_path / "r.csv")
    assert read_rows(tmp_path / "r.csv")[3].status == "failed"


def test_spec_document_roundtrip(tmp_path):
    spec = replace(TINY, sigma_c=0.5, param="sigma_a", values=(0.0, 0.3))
    assert spec_from_document(spec_to_document(spec)) == spec
    path = tmp_path / "c.toml"
    path.write_text(render_template(spec))
    assert spec_from_document(load_toml(path)) == spec


def test_template_is_commented_and_parses(tmp_path):
    text = render_template(default_spec())
    assert text.count("# ") > 20
    path = tmp_path / "t.toml"
    path.write_text(text)
    assert spec_from_document(load_toml(path)) == default_spec()


def test_cli_init_run_summarize(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    assert main(["init", "--out", str(cfg)]) == 0
    assert main(["init", "--out", str(cfg)]) == 2
    cfg.write_text(render_template(replace(TINY, values=(60,), n_seeds=1)))
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["run", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(out2), "--method", "potec,ips"]) == 0
    assert len(read_rows(out1 / "results.csv")) == 3
    assert {r.method for r in read_rows(out2 / "results.csv")} == {"potec", "ips"}
    assert main(["summarize", "--results", str(out1 / "results.csv")]) == 0
    assert "potec" in capsys.readouterr().out


def test_cli_out_dir_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "c.toml"
    cfg.write_text(render_template(replace(TINY, values=(60,), n_seeds=1, methods=("ips",))))
    monkeypatch.setenv("POTEC_OUT_DIR", str(tmp_path / "env_out"))
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "env_out" / "results.csv").exists()


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--cases", "5"]) == 0
    assert "[PASS]" in capsys.readouterr().out


def test_serialize_roundtrip(tmp_path):
    env = build_synthetic_env(EnvConfig(n_actions=8, n_clusters=2, context_dim=3), 0)
    D = sample_logged_data(env, 120, 0, repeats_per_context=4)
    cfg = TrainConfig(epochs=1, policy_hidden=(4,), pair_threshold_factor=1,
                      regression=RegressionConfig(hidden=(3,), epochs=1))
    pol, _, diag = run_potec(D, env.cluster_map, env, cfg)
    X = env.sample_contexts(10, np.random.default_rng(0))
    for obj in (pol, diag["regressor"]):
        serialize.save(obj, tmp_path / "m.json")
        back = serialize.load(tmp_path / "m.json")
        attr = "probs" if obj is pol else "predict"
        assert np.array_equal(getattr(back, attr)(X), getattr(obj, attr)(X))
    ev = ValueEvaluator(env, X)
    assert ev(serialize.load(tmp_path / "m.json") if False else pol) == ev(pol)
    with pytest.raises(ConfigurationError):
        serialize.to_dict(object())
