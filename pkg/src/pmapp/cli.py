"""Command line entry point: ``pmapp <command> [options]``.

Exit codes: 0 ok, 1 validation failure, 2 input error, 3 optimizer did not
converge (the plan is still written).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flowsim import (
    ArrivalModel,
    InvalidQueueParams,
    QueueConfig,
    UnstableQueue,
    mdi_prediction,
    sample_arrivals,
    simulate,
)
from .geometry import GeometryError, load_environment
from .optimizer import AnnealSchedule, OptimizerError, lm_minimize
from .planmodel import load_plan, save_plan, validate_plan
from .render import render_svg
from .seedplan import CyclicConstraints, PeriodTooSmall, initial_plan

EXIT_OK, EXIT_INVALID, EXIT_INPUT, EXIT_NOCONV = 0, 1, 2, 3
LAMBDA_GRID = [0.25 * i for i in range(1, 11)]

log = logging.getLogger("pmapp")


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    env: str | None = None
    plan: str | None = None
    M: int = 1
    K: int = 32
    seed: int = 0
    seeds: int = 10
    lambdas: list = field(default_factory=list)
    queue: QueueConfig = field(default_factory=QueueConfig)
    horizon: float | None = None
    iters: int = 50_000
    phase2_iters: int | None = None
    c: float = 1.0
    tau: float | None = None
    tol: float = 1e-3
    out: str | None = None
    trace_out: str | None = None

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        lams = getattr(ns, "lambdas", None) or []
        if any(not lam > 0 for lam in lams):
            raise InputError("lambda values must be positive")
        if getattr(ns, "cycle", 1) < 1:
            raise InputError("--cycle must be at least 1")
        try:
            queue = QueueConfig.parse(getattr(ns, "queue_cap", None))
        except ValueError as e:
            raise InputError(str(e)) from e
        plan = getattr(ns, "plan", None)
        if plan is not None and not Path(plan).exists():
            raise InputError(f"no such file: {plan}")
        return cls(
            command=ns.command,
            env=getattr(ns, "env", None),
            plan=plan,
            M=getattr(ns, "cycle", 1),
            K=getattr(ns, "K", 32),
            seed=ns.seed,
            seeds=getattr(ns, "seeds", 10),
            lambdas=lams,
            queue=queue,
            horizon=getattr(ns, "horizon", None),
            iters=getattr(ns, "iters", 50_000),
            phase2_iters=getattr(ns, "phase2_iters", None),
            c=getattr(ns, "c", 1.0),
            tau=getattr(ns, "tau", None),
            tol=getattr(ns, "tol", 1e-3),
            out=ns.out,
            trace_out=getattr(ns, "trace_out", None),
        )


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PMAPP_THREADS", "1")))
    except ValueError:
        return 1


def _num(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def _write_csv(path: str | None, header: list[str], rows: list[list]):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(x) for x in row])
    finally:
        if path:
            fh.close()


def _load_plan(path: str):
    try:
        return load_plan(path)
    except FileNotFoundError as e:
        raise InputError(f"no such file: {path}") from e
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise InputError(f"cannot parse plan {path}: {e}") from e


# --------------------------------------------------------------------------
# commands


def cmd_gen_initial(cfg: RunConfig) -> int:
    if cfg.env is None:
        raise InputError("--env is required")
    try:
        env = load_environment(cfg.env)
    except FileNotFoundError as e:
        raise InputError(f"no such environment: {cfg.env}") from e
    plan, sched = initial_plan(env, cfg.M, K=cfg.K)
    out = cfg.out or f"{env.name}_M{cfg.M}_init.json"
    save_plan(plan, out)
    print(f"tau0={sched.tau0:.6g} written {out}")
    return EXIT_OK


def cmd_optimize(cfg: RunConfig) -> int:
    plan = _load_plan(cfg.plan)
    sched = AnnealSchedule(max_iters=cfg.iters)
    if cfg.phase2_iters is not None:
        sched.phase2_iters = cfg.phase2_iters
    res = lm_minimize(plan, sched)
    out = cfg.out or str(Path(cfg.plan).with_name(Path(cfg.plan).stem + "_opt.json"))
    final = res.plan
    if not res.converged:
        final = final.replace(meta={**final.meta, "warning": "max-iterations"})
        log.warning("stopped at the iteration cap (%d) before converging", res.iterations)
    save_plan(final, out)
    trace_out = cfg.trace_out or str(Path(out).with_suffix("")) + "_trace.csv"
    _write_csv(trace_out, ["iteration", "cost", "tau", "r", "active_pairs"],
               [[t.iteration, t.cost, t.tau, t.r, t.active_pairs] for t in res.trace])
    ok = validate_plan(final, tol=cfg.tol).ok
    print(f"tau={final.tau:.6g} status={res.status} valid={ok} iterations={res.iterations} written {out}")
    if not res.converged:
        return EXIT_NOCONV
    return EXIT_OK if ok else EXIT_INVALID


def cmd_validate(cfg: RunConfig) -> int:
    plan = _load_plan(cfg.plan)
    report = validate_plan(plan, tol=cfg.tol)
    for v in report.violations:
        sys.stderr.write(json.dumps(v.to_dict(), sort_keys=True) + "\n")
    print("ok" if report.ok else f"{len(report.violations)} violations")
    return EXIT_OK if report.ok else EXIT_INVALID


def _sim_job(args):
    plan, lam, seed, c, horizon, queue = args
    trace = sample_arrivals(ArrivalModel(c, lam, seed, horizon), plan.N)
    return simulate(plan, trace, queue, validate=False)


SIM_HEADER = ["lambda", "queue_cap", "seed", "throughput", "avg_delay", "served", "failed",
              "mean_wait", "predicted_W"]


def cmd_simulate(cfg: RunConfig) -> int:
    plan = _load_plan(cfg.plan)
    report = validate_plan(plan, tol=cfg.tol)
    if not report.ok:
        log.error("plan fails validation; refusing to simulate")
        return EXIT_INVALID
    lams = cfg.lambdas or LAMBDA_GRID
    horizon = cfg.horizon or (1000.0 if cfg.queue.capacity is None else 100.0)
    seeds = [cfg.seed + i for i in range(cfg.seeds)]
    jobs = [(plan, lam, s, cfg.c, horizon, cfg.queue) for lam in lams for s in seeds]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_sim_job, jobs))
    else:
        results = [_sim_job(j) for j in jobs]

    rows = []
    cap = cfg.queue.label()
    for i, lam in enumerate(lams):
        try:
            W = mdi_prediction(lam, cfg.c, plan.tau).W
        except (UnstableQueue, InvalidQueueParams):
            W = math.nan
        block = results[i * len(seeds) : (i + 1) * len(seeds)]
        vals = []
        for s, m in zip(seeds, block):
            row = [m.throughput, m.average_delay, m.served, m.failed, m.mean_wait]
            vals.append(row)
            rows.append([lam, cap, s, *row, W])
        arr = np.array(vals, dtype=float)
        ddof = 1 if len(vals) > 1 else 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rows.append([lam, cap, "mean", *map(float, np.nanmean(arr, axis=0)), W])
            rows.append([lam, cap, "std", *map(float, np.nanstd(arr, axis=0, ddof=ddof)), W])
    _write_csv(cfg.out, SIM_HEADER, rows)
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    tau = cfg.tau
    if tau is None:
        if cfg.plan is None:
            raise InputError("give --tau or a plan file")
        tau = _load_plan(cfg.plan).tau
    rows = []
    for lam in cfg.lambdas or LAMBDA_GRID:
        try:
            p = mdi_prediction(lam, cfg.c, tau)
            rows.append([lam, p.D, p.rho, p.W_prime, p.W, "ok"])
        except UnstableQueue:
            rows.append([lam, tau - cfg.c, (tau - cfg.c) * lam, "unstable", "unstable", "unstable"])
        except InvalidQueueParams as e:
            raise InputError(str(e)) from e
    _write_csv(cfg.out, ["lambda", "D", "rho", "W_prime", "W", "status"], rows)
    return EXIT_OK


def cmd_render(cfg: RunConfig) -> int:
    if cfg.plan is not None:
        plan = _load_plan(cfg.plan)
        env = plan.env
    elif cfg.env is not None:
        plan, env = None, load_environment(cfg.env)
    else:
        raise InputError("give a plan file or --env")
    svg = render_svg(env, plan)
    if cfg.out:
        Path(cfg.out).write_text(svg)
    else:
        sys.stdout.write(svg)
    return EXIT_OK


COMMANDS = {
    "gen-initial": cmd_gen_initial,
    "optimize": cmd_optimize,
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmapp", description="Periodic multi-agent path planning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("gen-initial", help="relaxed initial plan for a scene")
    sp.add_argument("--env", required=True, help="built-in scene a-f, scene kind or JSON file")
    sp.add_argument("--cycle", "-M", type=int, default=1)
    sp.add_argument("--K", type=int, default=32)
    common(sp)

    sp = sub.add_parser("optimize", help="optimize an initial plan")
    sp.add_argument("plan")
    sp.add_argument("--iters", type=int, default=50_000, help="iteration cap")
    sp.add_argument("--phase2-iters", type=int, default=None)
    sp.add_argument("--trace-out", default=None)
    sp.add_argument("--tol", type=float, default=1e-3)
    common(sp)

    sp = sub.add_parser("validate", help="exact feasibility check")
    sp.add_argument("plan")
    sp.add_argument("--tol", type=float, default=1e-3)
    common(sp)

    sp = sub.add_parser("simulate", help="online deployment sweep")
    sp.add_argument("plan")
    sp.add_argument("--lambda", dest="lambdas", type=float, action="append")
    sp.add_argument("--seeds", type=int, default=10, help="repetitions per lambda")
    sp.add_argument("--queue-cap", default="inf")
    sp.add_argument("--horizon", type=float, default=None)
    sp.add_argument("--c", type=float, default=1.0)
    sp.add_argument("--tol", type=float, default=1e-3)
    common(sp)

    sp = sub.add_parser("analyze", help="M/D/1 predictions")
    sp.add_argument("plan", nargs="?")
    sp.add_argument("--tau", type=float, default=None)
    sp.add_argument("--lambda", dest="lambdas", type=float, action="append")
    sp.add_argument("--c", type=float, default=1.0)
    common(sp)

    sp = sub.add_parser("render", help="SVG drawing of a plan")
    sp.add_argument("plan", nargs="?")
    sp.add_argument("--env", default=None)
    common(sp)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_args(ns)
        return COMMANDS[cfg.command](cfg)
    except (InputError, GeometryError, CyclicConstraints, PeriodTooSmall) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INPUT
    except OptimizerError as e:
        sys.stderr.write(f"optimizer: {e}\n")
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
