"""Method comparison while varying n, |A| or |C| at desk scale.

    python scripts/sweep_main.py --param n --values 500,1000,2000,4000 --seeds 10 --out results/main_n
"""
import argparse
import logging

from potec.experiment import METHODS, run_sweep, summarize
from potec.verification import desk_spec


def parse_values(s):
    return tuple(float(v) if "." in v else int(v) for v in s.split(","))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--param", default="n", choices=("n", "n_actions", "n_clusters"))
    ap.add_argument("--values", default="500,1000,2000,4000")
    ap.add_argument("--methods", default="potec,reg_based,ips,dr,potec1")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/main")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    methods = tuple(m for m in args.methods.split(",") if m in METHODS)
    spec = desk_spec(param=args.param, values=parse_values(args.values), methods=methods, n_seeds=args.seeds)
    rows = run_sweep(spec, args.out, jobs=args.jobs)
    for s in summarize(rows):
        print(f"{s['method']:<10} {args.param}={s['value']:<6} {s['mean']:.4f} [{s['ci_low']:.4f}, {s['ci_high']:.4f}]")


if __name__ == "__main__":
    main()
