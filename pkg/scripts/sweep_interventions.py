"""NDCG over time for several intervention counts, one summary CSV per count.

Each count m runs the same seeds; the summaries hold the mean and percentile
band of trained and logging-policy NDCG at every eval point, ready to plot.

    python scripts/sweep_interventions.py --m 0 1 3 10 --runs 5 --out sweep/
"""
import argparse
from dataclasses import replace
from pathlib import Path

from intervention_ltr.cli import parse_config
from intervention_ltr.experiment import ExperimentConfig, format_results, format_summary, run_experiment, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML config; defaults to the built-in desk setup")
    ap.add_argument("--m", type=int, nargs="+", default=[0, 1, 3, 10])
    ap.add_argument("--kind", default=None, help="override the estimator")
    ap.add_argument("--runs", type=int, default=None)
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--out", default="sweep")
    args = ap.parse_args()

    base = parse_config(args.config) if args.config else ExperimentConfig()
    if args.kind:
        base = replace(base, kind=args.kind)
    if args.runs:
        base = replace(base, n_runs=args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for m in args.m:
        series = run_experiment(replace(base, n_interventions=m), parallel=args.parallel)
        stem = f"{base.kind.value}_m{m}"
        (out / f"{stem}_results.csv").write_text(format_results(series))
        if len(series) > 1:
            rows = summarize(series)
            (out / f"{stem}_summary.csv").write_text(format_summary(rows))
            last = rows[-1]
            print(f"m={m:<3} final NDCG {last.mean_trained:.4f} [{last.lo_trained:.4f}, {last.hi_trained:.4f}]", flush=True)
        else:
            print(f"m={m:<3} final NDCG {series[0].final_trained:.4f}", flush=True)


if __name__ == "__main__":
    main()
