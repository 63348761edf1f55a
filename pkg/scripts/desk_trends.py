"""Final test NDCG of three arms on the desk configuration, with paired intervals.

Arms: intervention-aware with 10 interventions, intervention-aware without
interventions, and the affine estimator without interventions. Runs share
seeds, so differences are paired per run.

    python scripts/desk_trends.py --runs 20
    python scripts/desk_trends.py --config configs/desk.toml --runs 4 --out trends.csv
"""
import argparse
import csv
import time
from dataclasses import replace

import numpy as np

from intervention_ltr.cli import parse_config
from intervention_ltr.experiment import ExperimentConfig, paired_difference_interval, run_single


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML config; defaults to the built-in desk setup")
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--m", type=int, default=10, help="interventions for the first arm")
    ap.add_argument("--confidence", type=float, default=0.9)
    ap.add_argument("--out", help="optional CSV of per-run final NDCG")
    args = ap.parse_args()

    base = parse_config(args.config) if args.config else ExperimentConfig()
    base = replace(base, n_runs=args.runs, eval_points=(base.T,), n_interventions=0)
    arms = {
        f"aware_m{args.m}": replace(base, kind="intervention_aware", n_interventions=args.m),
        "aware_m0": replace(base, kind="intervention_aware"),
        "affine_m0": replace(base, kind="affine"),
    }
    data = base.dataset.load()
    finals = {}
    for name, cfg in arms.items():
        start = time.perf_counter()
        finals[name] = [run_single(cfg, r, data).final_trained for r in range(args.runs)]
        print(f"{name:>12}  mean {np.mean(finals[name]):.4f}  ({time.perf_counter() - start:.0f}s)", flush=True)

    names = list(arms)
    for a, b in [(names[0], names[1]), (names[1], names[2])]:
        mean, lo, hi = paired_difference_interval(finals[a], finals[b], args.confidence)
        print(f"{a} - {b}: {mean:+.4f}  [{lo:+.4f}, {hi:+.4f}]")

    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run_id", *names])
            for r in range(args.runs):
                w.writerow([r, *(repr(finals[n][r]) for n in names)])


if __name__ == "__main__":
    main()
