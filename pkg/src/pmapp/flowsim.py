"""Online deployment of a periodic plan.

Agents appear at each start with gaps ``c + Exp(lam)``, wait in a per-stream
queue for a free period and then follow the trajectory of that period's slot.
Also holds the M/D/1 estimate of the mean time an agent spends before leaving
its start and a plain queue simulation to check it against.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import shortest_path
from .planmodel import PeriodicPlan, position_at, validate_plan


class UnstableQueue(ValueError):
    pass


class InvalidQueueParams(ValueError):
    pass


class InvalidPlan(ValueError):
    pass


class CollisionDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class ArrivalModel:
    c: float = 1.0
    lam: float = 1.0
    seed: int = 0
    horizon: float = 1000.0

    def check(self) -> "ArrivalModel":
        if not self.c >= 0:
            raise ValueError("c must be non-negative")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        return self


@dataclass(frozen=True)
class QueueConfig:
    capacity: int | None = None  # None means unbounded

    def __post_init__(self):
        if self.capacity is not None and (int(self.capacity) != self.capacity or self.capacity < 1):
            raise ValueError(f"queue capacity must be a positive integer, got {self.capacity}")

    @classmethod
    def parse(cls, text: str | int | None) -> "QueueConfig":
        if text is None or str(text).lower() in ("inf", "infinite", "none"):
            return cls(None)
        return cls(int(text))

    def label(self) -> str:
        return "inf" if self.capacity is None else str(self.capacity)


@dataclass
class StreamTrace:
    seed: int
    lam: float
    c: float
    horizon: float
    streams: list  # one ascending float array per stream

    @property
    def total(self) -> int:
        return sum(len(s) for s in self.streams)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "lambda": self.lam,
            "c": self.c,
            "horizon": self.horizon,
            "streams": [[float(t) for t in s] for s in self.streams],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StreamTrace":
        streams = [np.asarray(s, dtype=float) for s in d["streams"]]
        for s in streams:
            if len(s) > 1 and np.any(np.diff(s) <= 0):
                raise ValueError("arrival times must be strictly increasing per stream")
        return cls(int(d["seed"]), float(d["lambda"]), float(d["c"]), float(d["horizon"]), streams)


def save_trace(trace: StreamTrace, path: str | Path):
    Path(path).write_text(json.dumps(trace.to_dict(), indent=1) + "\n")


def load_trace(path: str | Path) -> StreamTrace:
    return StreamTrace.from_dict(json.loads(Path(path).read_text()))


def sample_arrivals(model: ArrivalModel, n_streams: int) -> StreamTrace:
    """Arrival times below the horizon; each stream draws from its own child seed."""
    model.check()
    children = np.random.SeedSequence(model.seed).spawn(n_streams)
    mean_gap = model.c + 1.0 / model.lam
    chunk = int(1.2 * model.horizon / mean_gap) + 16
    streams = []
    for ss in children:
        rng = np.random.default_rng(ss)
        times = []
        t = 0.0
        while t < model.horizon:
            gaps = model.c + rng.exponential(1.0 / model.lam, size=chunk)
            cum = t + np.cumsum(gaps)
            times.append(cum)
            t = float(cum[-1])
        arr = np.concatenate(times) if times else np.zeros(0)
        streams.append(arr[arr < model.horizon])
    return StreamTrace(model.seed, model.lam, model.c, model.horizon, streams)


# --------------------------------------------------------------------------
# dispatching


@dataclass(frozen=True)
class Assignment:
    n: int
    arrival: float
    period: int
    slot: int
    depart: float


class Dispatcher:
    """Per-stream period bookkeeping.

    An agent arriving at t takes period ``max(ceil(t / tau), a' + 1)`` where a'
    is the last period handed out on its stream.  Agents whose period has not
    started yet wait off-map; the one due next is at the head and the rest
    occupy the queue, so a bounded queue overflows once ``capacity`` agents
    are already lined up behind the head.
    """

    def __init__(self, N: int, tau: float, M: int, queue: QueueConfig | None = None):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.tau, self.M = float(tau), int(M)
        self.queue = queue or QueueConfig()
        self.last = [-1] * N
        self._pending = [deque() for _ in range(N)]

    def waiting(self, n: int, t: float) -> int:
        pend = self._pending[n]
        while pend and pend[0] <= t:
            pend.popleft()
        return len(pend)

    def assign(self, t: float, n: int) -> Assignment | None:
        if t < 0:
            raise ValueError("arrival time must be non-negative")
        w = self.waiting(n, t)
        cap = self.queue.capacity
        if cap is not None and w > cap:
            return None
        a = max(math.ceil(t / self.tau), self.last[n] + 1)
        self.last[n] = a
        depart = a * self.tau
        self._pending[n].append(depart)
        return Assignment(n, float(t), a, a % self.M, depart)


def assign(t: float, n: int, state: Dispatcher) -> Assignment | None:
    """Functional alias of ``Dispatcher.assign``; None signals a failure."""
    return state.assign(t, n)


# --------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class AgentRecord:
    n: int
    arrival: float
    failed: bool
    period: int = -1
    slot: int = -1
    depart: float = math.nan
    goal_time: float = math.nan
    delay: float = math.nan

    @property
    def wait(self) -> float:
        return self.depart - self.arrival


@dataclass
class SimMetrics:
    """Aggregates of one run.

    ``served`` counts every agent that was not discarded; ``entered`` only
    those that left their start before the horizon.  Delay and wait averages
    are taken over entered agents, so agents still queued at the end
    (``censored``) do not bias them.
    """

    throughput: float
    average_delay: float
    served: int
    failed: int
    mean_wait: float
    entered: int
    censored: int
    horizon: float
    per_stream: list = field(default_factory=list)
    agents: list = field(default_factory=list, repr=False)

    @property
    def total(self) -> int:
        return self.served + self.failed

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("agents")
        return d


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan


def free_flight_times(plan: PeriodicPlan) -> list[float]:
    return [shortest_path(plan.env, n).length / plan.v_max for n in range(plan.N)]


def spot_check(plan: PeriodicPlan, agents: list[AgentRecord], n_samples: int = 200,
               tol: float = 1e-3) -> float:
    """Smallest pairwise distance among moving agents at evenly spaced instants.

    Raises CollisionDetected if it drops below 2r - tol.
    """
    moving = [a for a in agents if not a.failed]
    if len(moving) < 2:
        return math.inf
    dur = plan.durations
    t_end = max(a.goal_time for a in moving)
    worst = math.inf
    # offset by an irrational fraction so samples avoid period boundaries
    for s in (np.arange(n_samples) + 0.5 / math.sqrt(2)) * (t_end / n_samples):
        pts = []
        for a in moving:
            if a.depart <= s <= a.depart + dur[a.n, a.slot]:
                pts.append(position_at(plan.trajectory(a.n, a.slot), s - a.depart))
        if len(pts) < 2:
            continue
        P = np.array(pts)
        D = np.linalg.norm(P[:, None] - P[None], axis=-1)
        D[np.diag_indices(len(P))] = np.inf
        d = float(D.min())
        worst = min(worst, d)
        if d < 2 * plan.r - tol:
            raise CollisionDetected(f"agents {d:.4g} apart at t={s:.4g}")
    return worst


def simulate(plan: PeriodicPlan, trace: StreamTrace, queue: QueueConfig | None = None,
             validate: bool = True, spot_samples: int = 200) -> SimMetrics:
    """Dispatch every arrival of the trace onto the plan and collect metrics.

    ``validate=False`` skips the exact plan check (for sweeps that ran it
    once already); ``spot_samples=0`` disables the collision spot check.
    """
    if len(trace.streams) != plan.N:
        raise ValueError(f"trace has {len(trace.streams)} streams, plan has {plan.N}")
    if validate:
        report = validate_plan(plan, tol=1e-3)
        if not report.ok:
            raise InvalidPlan("plan fails validation: " + ", ".join(v.kind for v in report.violations[:5]))
    queue = queue or QueueConfig()
    disp = Dispatcher(plan.N, plan.tau, plan.M, queue)
    free = free_flight_times(plan)
    dur = plan.durations
    events = sorted((float(t), n) for n, s in enumerate(trace.streams) for t in s)
    agents = []
    for t, n in events:
        asg = disp.assign(t, n)
        if asg is None:
            agents.append(AgentRecord(n, t, True))
            continue
        goal = asg.depart + float(dur[n, asg.slot])
        agents.append(AgentRecord(n, t, False, asg.period, asg.slot, asg.depart, goal, goal - t - free[n]))
    if spot_samples:
        spot_check(plan, agents, spot_samples)

    H = trace.horizon
    entered = [a for a in agents if not a.failed and a.depart <= H]
    per_stream = []
    for n in range(plan.N):
        mine = [a for a in agents if a.n == n]
        ent = [a for a in mine if not a.failed and a.depart <= H]
        per_stream.append({
            "n": n,
            "arrivals": len(mine),
            "failed": sum(a.failed for a in mine),
            "entered": len(ent),
            "throughput": len(ent) / H,
            "average_delay": _mean([a.delay for a in ent]),
        })
    failed = sum(a.failed for a in agents)
    return SimMetrics(
        throughput=len(entered) / H,
        average_delay=_mean([a.delay for a in entered]),
        served=len(agents) - failed,
        failed=failed,
        mean_wait=_mean([a.wait for a in entered]),
        entered=len(entered),
        censored=len(agents) - failed - len(entered),
        horizon=H,
        per_stream=per_stream,
        agents=agents,
    )


# --------------------------------------------------------------------------
# queueing estimate


@dataclass(frozen=True)
class QueuePrediction:
    D: float
    rho: float
    W_prime: float
    W: float


def mdi_prediction(lam: float, c: float, tau: float) -> QueuePrediction:
    """Mean time to leave the start under the M/D/1 reduction.

    Subtracting c from both the gaps and the service time tau leaves Poisson
    arrivals and deterministic service D = tau - c.
    """
    if not tau > c:
        raise InvalidQueueParams(f"tau={tau} must exceed c={c}")
    if lam < 0:
        raise InvalidQueueParams("lambda must be non-negative")
    D = tau - c
    rho = D * lam
    if rho >= 1:
        raise UnstableQueue(f"utilization {rho:.4g} >= 1")
    Wp = D + rho / (2 * (1 - rho)) * D
    return QueuePrediction(D, rho, Wp, Wp + c)


def queue_sojourns(lam: float, c: float, tau: float, n_arrivals: int, seed: int = 0) -> np.ndarray:
    """Sojourn times of a single server with service tau and gaps c + Exp(lam).

    Lindley recursion w_{i+1} = max(0, w_i + tau - gap_{i+1}); sojourn = w + tau.
    """
    rng = np.random.default_rng(seed)
    gaps = c + rng.exponential(1.0 / lam, size=n_arrivals)
    w = np.empty(n_arrivals)
    cur = 0.0
    for i in range(n_arrivals):
        if i:
            cur = max(0.0, cur + tau - gaps[i])
        w[i] = cur
    return w + tau


def batch_mean_se(x: np.ndarray, n_batches: int = 100) -> tuple[float, float]:
    """Mean and its standard error from non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    b = len(x) // n_batches
    if b < 1:
        raise ValueError("not enough samples for the requested batches")
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(x.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))
