"""Robustness sweeps: cluster noise, unsupported actions, logging-policy beta, reward-model noise.

    python scripts/sweep_ablation.py cluster_noise --values 0,0.1,0.3,0.5
    python scripts/sweep_ablation.py sigma_c --values 0,0.5,1.0
    python scripts/sweep_ablation.py sigma_a --values 0,0.3,1.0
"""
import argparse
import logging

from potec.experiment import run_sweep, summarize
from potec.verification import desk_spec

DEFAULT_METHODS = {
    "cluster_noise": "potec,ips,dr",
    "n_unsupported": "potec,ips,dr,reg_based",
    "beta": "potec,ips,dr,reg_based",
    "sigma_c": "potec,reg_based,dr",
    "sigma_a": "potec,reg_based,dr",
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("param", choices=sorted(DEFAULT_METHODS))
    ap.add_argument("--values", required=True)
    ap.add_argument("--methods")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    values = tuple(float(v) if args.param not in ("n_unsupported",) else int(v) for v in args.values.split(","))
    extra = {}
    # noisy-model sweeps hold the other noise axis fixed
    if args.param == "sigma_c":
        extra["sigma_a"] = 0.0
    elif args.param == "sigma_a":
        extra["sigma_c"] = 0.3
    spec = desk_spec(param=args.param, values=values, n_seeds=args.seeds,
                     methods=tuple((args.methods or DEFAULT_METHODS[args.param]).split(",")), **extra)
    rows = run_sweep(spec, args.out or f"results/{args.param}", jobs=args.jobs)
    for s in summarize(rows):
        print(f"{s['method']:<10} {args.param}={s['value']:<6} {s['mean']:.4f} [{s['ci_low']:.4f}, {s['ci_high']:.4f}]")


if __name__ == "__main__":
    main()
