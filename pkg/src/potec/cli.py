"""Command-line entry point: init, run, summarize, verify, gradcheck."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .bandit_env import _toml_value, load_toml
from .experiment import (
    SweepSpec,
    read_rows,
    run_sweep,
    spec_from_document,
    spec_to_document,
    summarize,
    write_summary,
)
from .verification import DESK_OFFSET, check_gradients, run_oracle_suite

OUT_ENV_VAR = "POTEC_OUT_DIR"

COMMENTS = {
    "env": {
        "n_actions": "number of actions |A|",
        "n_clusters": "number of true action clusters |C|",
        "context_dim": "context dimension",
        "beta": "logging policy inverse temperature on q (0 = reward-independent logging)",
        "reward_noise": '"gaussian" or "bernoulli"',
        "reward_std": "gaussian reward noise sd",
        "n_discrete_contexts": "0 = continuous standard-normal contexts",
        "action_feature_dim": "dimension of the action features used to form clusters",
        "reward_offset": "constant added to q so that V(pi_0) > 0 for normalization",
    },
    "sweep": {
        "param": "swept axis: n, n_actions, n_clusters, beta, cluster_noise, n_unsupported, sigma_c, sigma_a",
        "values": "values of the swept axis",
        "n_seeds": "replications per value",
        "master_seed": "all cell seeds derive from (master_seed, seed index, value)",
        "n": "training records",
        "repeats_per_context": "records per drawn context (enables pairwise data)",
        "cluster_noise": "fraction of actions moved to a wrong cluster for POTEC",
        "n_unsupported": "actions removed from the logging support",
        "sigma_c": 'cluster-level noise of a frozen reward model q + eps; "none" = learned models',
        "sigma_a": 'action-level noise of the frozen reward model; "none" = learned models',
        "n_test": "fresh test contexts for the exact policy value",
        "tune_baselines": "tune baselines on the test value (oracle tuning, labeled in outputs)",
    },
    "methods": {"list": "any of potec, reg_based, ips, dr, sips, potec1"},
    "train": {
        "learning_rate": "Adam step size (POTEC default)",
        "weight_decay": "decoupled weight decay (POTEC default)",
        "batch_size": "minibatch size (POTEC default)",
        "epochs": "passes over the logged data",
        "policy_hidden": "hidden layer widths of every policy network",
        "sips_fraction": "relevant-action fraction for IPS-style weighting when not tuned",
        "temperature": "Reg-based softmax temperature when not tuned",
        "eval_every": "epochs between learning-curve evaluations",
        "pair_threshold_factor": "pairwise regression needs factor x (last hidden width + 1) pairs",
        "weight_decay_grid": "baseline search grid",
        "learning_rate_grid": "baseline search grid",
        "batch_size_grid": "baseline search grid",
        "fraction_grid": "baseline search grid for the relevant-action fraction",
        "temperature_grid": "Reg-based temperature grid",
    },
    "train.regression": {
        "hidden": "hidden widths of reward regressors",
        "learning_rate": "Adam step size for regression",
        "weight_decay": "regression weight decay",
        "batch_size": "regression minibatch size",
        "epochs": "regression epochs",
    },
}


def default_spec() -> SweepSpec:
    from .bandit_env import EnvConfig

    return SweepSpec(env=EnvConfig(reward_offset=DESK_OFFSET), values=(1000, 2000, 4000, 8000), n_seeds=10)


def render_template(spec: SweepSpec) -> str:
    doc = spec_to_document(spec)
    lines = ["# Sweep configuration; every key shows its default."]
    for section, body in doc.items():
        lines.append("")
        lines.append(f"[{section}]")
        notes = COMMENTS.get(section, {})
        for k, v in body.items():
            if v is None:
                continue
            note = notes.get(k)
            if note:
                lines.append(f"# {note}")
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _default_out() -> Path:
    return Path(os.environ.get(OUT_ENV_VAR, "results"))


def cmd_init(args) -> int:
    path = Path(args.out) if args.out else Path("potec.toml")
    if path.exists() and not args.force:
        print(f"{path} exists; pass --force to overwrite", file=sys.stderr)
        return 2
    path.write_text(render_template(default_spec()))
    print(f"wrote {path}")
    return 0


def cmd_run(args) -> int:
    from dataclasses import replace

    spec = spec_from_document(load_toml(args.config)) if args.config else default_spec()
    if args.seeds is not None:
        spec = replace(spec, n_seeds=args.seeds)
    if args.method:
        spec = replace(spec, methods=tuple(m.strip() for m in args.method.split(",") if m.strip()))
    out = Path(args.out) if args.out else _default_out()
    rows = run_sweep(spec, out, jobs=args.jobs)
    failed = [r for r in rows if r.status != "ok"]
    print(f"{len(rows)} rows, {len(failed)} failed -> {out / 'results.csv'}")
    for r in failed:
        print(f"  failed: {r.method} value={r.value} seed={r.seed}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_summarize(args) -> int:
    results = Path(args.results) if args.results else _default_out() / "results.csv"
    summary = summarize(read_rows(results))
    out = Path(args.out) if args.out else results.with_name("summary.csv")
    write_summary(summary, out)
    print(f"{'method':<10} {'value':>10} {'n':>3} {'mean':>8} {'95% CI':>20}")
    for s in summary:
        print(f"{s['method']:<10} {str(s['value']):>10} {s['n_seeds']:>3} {s['mean']:>8.4f} "
              f"[{s['ci_low']:.4f}, {s['ci_high']:.4f}]")
    return 0


def cmd_verify(args) -> int:
    results = run_oracle_suite(args.scale)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_gradcheck(args) -> int:
    r = check_gradients(args.cases, args.seed)
    print(r.line())
    return 0 if r.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="potec", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a commented config template")
    p.add_argument("--out", help="template path (default potec.toml)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("run", help="run a sweep and write results.csv and summary.csv")
    p.add_argument("--config")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or ./results)")
    p.add_argument("--seeds", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--method", help="comma-separated method list")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("summarize", help="bootstrap summary of a results.csv")
    p.add_argument("--results")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_summarize)

    p = sub.add_parser("verify", help="run the oracle checks")
    p.add_argument("--scale", type=float, default=0.1, help="fraction of the full Monte-Carlo budget")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference check of network and score gradients")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
