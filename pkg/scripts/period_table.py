"""Optimize every requested scene and cycle length and tabulate the periods.

    python scripts/period_table.py --scenes a f --cycles 1 2 --out periods.csv

Optimized plans are written next to the table as ``<scene><M>.json``.
"""
import argparse
import csv
import logging
import time
from pathlib import Path

from pmapp import AnnealSchedule, builtin_environment, initial_plan, lm_minimize, save_plan, validate_plan


def run_one(scene: str, M: int, K: int, phase2: int | None):
    plan, sched = initial_plan(builtin_environment(scene), M, K=K)
    schedule = AnnealSchedule() if phase2 is None else AnnealSchedule(phase2_iters=phase2)
    t0 = time.perf_counter()
    res = lm_minimize(plan, schedule)
    elapsed = time.perf_counter() - t0
    report = validate_plan(res.plan, tol=1e-3)
    return res, sched.tau0, report.ok, elapsed


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", nargs="+", default=list("abcdef"))
    ap.add_argument("--cycles", nargs="+", type=int, default=[1, 2])
    ap.add_argument("--K", type=int, default=32)
    ap.add_argument("--phase2-iters", type=int, default=None)
    ap.add_argument("--out", default="periods.csv")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "M", "tau0", "tau", "r", "status", "valid", "iterations", "seconds"])
        for scene in args.scenes:
            for M in args.cycles:
                res, tau0, ok, secs = run_one(scene, M, args.K, args.phase2_iters)
                save_plan(res.plan, out.parent / f"{scene}{M}.json")
                row = [scene, M, f"{tau0:.4f}", f"{res.plan.tau:.4f}", f"{res.r_opt:.4f}", res.status, ok,
                       res.iterations, f"{secs:.0f}"]
                w.writerow(row)
                fh.flush()
                logging.info(" ".join(map(str, row)))


if __name__ == "__main__":
    main()
