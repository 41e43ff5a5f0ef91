"""Throughput and delay of a plan over a range of arrival rates.

    python scripts/lambda_sweep.py plan.json --out sweep.csv

For each rate, runs unbounded and finite queues and prints the seed
averages next to the single-server queue prediction.
"""
import argparse
import csv
import math

import numpy as np

from pmapp import ArrivalModel, QueueConfig, load_plan, mdi_prediction, sample_arrivals, simulate
from pmapp.flowsim import InvalidQueueParams, UnstableQueue


def sweep(plan, lams, caps, seeds, c=1.0):
    for cap in caps:
        queue = QueueConfig(cap)
        horizon = 1000.0 if cap is None else 100.0
        for lam in lams:
            runs = [simulate(plan, sample_arrivals(ArrivalModel(c, lam, s, horizon), plan.N), queue, validate=False)
                    for s in range(seeds)]
            try:
                W = mdi_prediction(lam, c, plan.tau).W
            except (UnstableQueue, InvalidQueueParams):
                W = math.nan
            yield {
                "lambda": lam,
                "queue_cap": queue.label(),
                "throughput": float(np.mean([m.throughput for m in runs])),
                "avg_delay": float(np.nanmean([m.average_delay for m in runs])),
                "mean_wait": float(np.nanmean([m.mean_wait for m in runs])),
                "failed": float(np.mean([m.failed for m in runs])),
                "predicted_W": W,
                "plateau": plan.N / plan.tau,
            }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("plan")
    ap.add_argument("--lambdas", nargs="+", type=float, default=[0.25 * i for i in range(1, 11)])
    ap.add_argument("--caps", nargs="+", default=["inf", "5"])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args(argv)

    plan = load_plan(args.plan)
    caps = [QueueConfig.parse(c).capacity for c in args.caps]
    rows = list(sweep(plan, args.lambdas, caps, args.seeds))
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['queue_cap']:>4} lam={r['lambda']:.2f} thr={r['throughput']:.3f} "
              f"(cap {r['plateau']:.3f}) delay={r['avg_delay']:.2f} W={r['predicted_W']:.2f}")


if __name__ == "__main__":
    main()
