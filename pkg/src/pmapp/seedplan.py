"""Relaxed initial plans: alternate-pass ordering at path crossings, a
lexicographic longest-path DP over the ordering DAG, and resampling of the
timed schedule into K+1 waypoints.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .geometry import Environment, ReferencePath, path_intersections, shortest_path
from .planmodel import PeriodicPlan

DEFAULT_SLACK = 1.0
TAU_FLOOR = 0.1


class CyclicConstraints(ValueError):
    pass


class PeriodTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class PassEvent:
    n: int
    k: int
    point: tuple[float, float]
    arc: float
    # minimum time to reach the next event (0 for the goal)
    min_leg_time: float


@dataclass(frozen=True)
class OrderConstraint:
    """``first`` passes its point at least ``slack`` before ``second``.

    Vertices are (n, m, k).  For kind "C2" the first vertex belongs to the
    previous cycle (slot M-1) and the second to slot 0 of the next one.
    """

    kind: str  # "C1" | "C2"
    first: tuple[int, int, int]
    second: tuple[int, int, int]
    slack: float = DEFAULT_SLACK


@dataclass
class TimedSchedule:
    M: int
    a: dict  # (n, m, k) -> int
    b: dict  # (n, m, k) -> float
    tau0: float
    events: list  # per stream, list of PassEvent
    constraints: list

    def time(self, v, tau: float) -> float:
        return self.a[v] * tau + self.b[v]


def pass_events(paths: list[ReferencePath], intersections, v_max: float = 1.0):
    """Starts, crossing points and goals along each path, with leg times."""
    stops = defaultdict(list)
    for n, n2, p, s, s2 in intersections:
        stops[n].append((s, tuple(map(float, p))))
        stops[n2].append((s2, tuple(map(float, p))))
    events = []
    for n, path in enumerate(paths):
        pts = [(0.0, tuple(map(float, path.vertices[0])))]
        pts += sorted(stops[n])
        pts.append((path.length, tuple(map(float, path.vertices[-1]))))
        evs = []
        for k, (s, p) in enumerate(pts):
            leg = (pts[k + 1][0] - s) / v_max if k + 1 < len(pts) else 0.0
            evs.append(PassEvent(n, k, p, s, leg))
        events.append(evs)
    return events


def build_pass_order(env: Environment, paths, intersections, M: int, slack: float = DEFAULT_SLACK):
    """Ordering constraints for M-agent platoons alternating at each crossing."""
    if M < 1:
        raise ValueError("M must be positive")
    events = pass_events(paths, intersections)
    index = {}
    for evs in events:
        for e in evs:
            index[(e.n, round(e.arc, 9))] = e.k
    out = []
    for n, n2, _p, s, s2 in intersections:
        k, k2 = index[(n, round(s, 9))], index[(n2, round(s2, 9))]
        # the stream reaching the crossing sooner goes first; ties by index
        if (s2, n2) < (s, n):
            n, n2, k, k2 = n2, n, k2, k
        chain = [(n, m, k) for m in range(M)] + [(n2, m, k2) for m in range(M)]
        for u, v in zip(chain, chain[1:]):
            out.append(OrderConstraint("C1", u, v, slack))
        out.append(OrderConstraint("C2", (n2, M - 1, k2), (n, 0, k), slack))
    return out


def schedule_dp(events, constraints, M: int, tau_floor: float = TAU_FLOOR) -> TimedSchedule:
    """Minimal (a, b) with t = a*tau + b under lexicographic order, then the
    least period making every constraint hold."""
    verts = [(e.n, m, e.k) for evs in events for m in range(M) for e in evs]
    leg = {(e.n, e.k): e.min_leg_time for evs in events for e in evs}
    preds = defaultdict(list)  # v -> [(u, wa, wb)]
    for evs in events:
        for e in evs[:-1]:
            for m in range(M):
                preds[(e.n, m, e.k + 1)].append(((e.n, m, e.k), 0, leg[(e.n, e.k)]))
    for c in constraints:
        if c.kind != "C1":
            continue
        (n, m, k), (n2, m2, k2) = c.first, c.second
        preds[c.second].append((c.first, m - m2, c.slack))
    for v in verts:
        if v[2] == 0 and preds[v]:
            raise CyclicConstraints(f"start vertex {v} has incoming constraints")

    # Kahn topological order
    succ = defaultdict(list)
    indeg = {v: 0 for v in verts}
    for v in verts:
        for u, _, _ in preds[v]:
            succ[u].append(v)
            indeg[v] += 1
    queue = sorted(v for v in verts if indeg[v] == 0)
    order = []
    while queue:
        u = queue.pop(0)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if len(order) != len(verts):
        raise CyclicConstraints("ordering constraints contain a cycle")

    a, b = {}, {}
    for v in order:
        best = (0, 0.0)
        for u, wa, wb in preds[v]:
            cand = (a[u] + wa, b[u] + wb)
            if cand[0] > best[0] or (cand[0] == best[0] and cand[1] > best[1]):
                best = cand
        a[v], b[v] = best

    # least tau keeping every edge and wraparound inequality
    tau0 = 0.0
    for v in verts:
        for u, wa, wb in preds[v]:
            coef = a[v] - a[u] - wa
            gap = wb - (b[v] - b[u])
            if coef > 0:
                tau0 = max(tau0, gap / coef)
    for c in constraints:
        if c.kind != "C2":
            continue
        u, v = c.first, c.second
        # (M-1)tau + t_u + R <= M tau + t_v
        coef = a[v] - a[u] + 1
        gap = c.slack + b[u] - b[v]
        if coef <= 0:
            raise CyclicConstraints("wraparound constraint cannot be met for any period")
        tau0 = max(tau0, gap / coef)
    tau0 = max(tau0, tau_floor)
    return TimedSchedule(M=M, a=a, b=b, tau0=float(tau0), events=events, constraints=constraints)


def check_schedule(sched: TimedSchedule, tau: float, tol: float = 1e-9) -> list[str]:
    """Constraint violations of the schedule at a given period (empty if ok)."""
    bad = []
    t = lambda v: sched.time(v, tau)
    M = sched.M
    for evs in sched.events:
        for m in range(M):
            if abs(t((evs[0].n, m, 0))) > tol:
                bad.append(f"start {(evs[0].n, m)}")
            for e in evs[:-1]:
                if t((e.n, m, e.k)) + e.min_leg_time > t((e.n, m, e.k + 1)) + tol:
                    bad.append(f"leg {(e.n, m, e.k)}")
    for c in sched.constraints:
        (n, m, k), (n2, m2, k2) = c.first, c.second
        if c.kind == "C1":
            ok = m * tau + t(c.first) + c.slack <= m2 * tau + t(c.second) + tol
        else:
            ok = (M - 1) * tau + t(c.first) + c.slack <= M * tau + t(c.second) + tol
        if not ok:
            bad.append(f"{c.kind} {c.first}->{c.second}")
    return bad


def longest_path_times(events, constraints, M: int, tau: float) -> dict:
    """Bellman-Ford style longest path with a fixed period (reference values)."""
    verts = [(e.n, m, e.k) for evs in events for m in range(M) for e in evs]
    edges = []
    for evs in events:
        for e in evs[:-1]:
            for m in range(M):
                edges.append(((e.n, m, e.k), (e.n, m, e.k + 1), e.min_leg_time))
    for c in constraints:
        if c.kind == "C1":
            edges.append((c.first, c.second, (c.first[1] - c.second[1]) * tau + c.slack))
    t = {v: (0.0 if v[2] == 0 else -np.inf) for v in verts}
    for _ in range(len(verts)):
        changed = False
        for u, v, w in edges:
            if t[u] + w > t[v] + 1e-12:
                t[v] = t[u] + w
                changed = True
        if not changed:
            break
    return t


def synthesize_initial_plan(
    env: Environment,
    paths: list[ReferencePath],
    schedule: TimedSchedule,
    K: int,
    tau_init: float | None = None,
    r0: float = 0.5,
    v_max: float = 1.0,
) -> PeriodicPlan:
    """Constant-speed motion between pass points, resampled at K equal steps."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if tau_init is None:
        tau_init = max(schedule.tau0, 2 * r0 / v_max)
    if tau_init < schedule.tau0 - 1e-12:
        raise PeriodTooSmall(f"tau_init={tau_init} below the minimal period {schedule.tau0}")
    N, M = env.N, schedule.M
    pts = np.zeros((N, M, K + 1, 2))
    dt = np.zeros((N, M))
    for n in range(N):
        evs = schedule.events[n]
        arcs = np.array([e.arc for e in evs])
        for m in range(M):
            times = np.array([schedule.time((n, m, e.k), tau_init) for e in evs])
            T = times[-1]
            dt[n, m] = T / K
            samples = np.linspace(0.0, T, K + 1)
            s = np.interp(samples, times, arcs)
            pts[n, m] = [paths[n].point_at(x) for x in s]
            pts[n, m, 0] = env.start(n)
            pts[n, m, K] = env.goal(n)
    meta = {"tau0": schedule.tau0, "relaxed": True}
    return PeriodicPlan(env, M, float(tau_init), 0.0, v_max, pts, dt, r0=r0, meta=meta)


def initial_plan(env: Environment, M: int, K: int = 32, r0: float = 0.5, v_max: float = 1.0,
                 slack: float = DEFAULT_SLACK, tau_init: float | None = None):
    """Full pipeline from environment to relaxed plan; returns (plan, schedule)."""
    paths = [shortest_path(env, n) for n in range(env.N)]
    inter = path_intersections(paths)
    cons = build_pass_order(env, paths, inter, M, slack)
    events = pass_events(paths, inter, v_max)
    sched = schedule_dp(events, cons, M)
    return synthesize_initial_plan(env, paths, sched, K, tau_init, r0, v_max), sched


def dag_edge_list(schedule: TimedSchedule) -> str:
    """Debug dump of the ordering DAG, one edge per line."""
    lines = []
    for evs in schedule.events:
        for e in evs[:-1]:
            for m in range(schedule.M):
                lines.append(f"leg {e.n},{m},{e.k} -> {e.n},{m},{e.k + 1} {e.min_leg_time:.6g}")
    for c in schedule.constraints:
        lines.append(f"{c.kind} {','.join(map(str, c.first))} -> {','.join(map(str, c.second))} {c.slack:g}")
    return "\n".join(lines) + "\n"
