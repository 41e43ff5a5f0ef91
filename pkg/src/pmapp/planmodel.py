"""Periodic plans: trajectories, periodic residues, collision pairs and an
exact continuous-time validator.

Arrays are indexed ``[n, m, k]`` with stream n and slot m counted from 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Environment, load_environment, segment_clearance

DEFAULT_K = 32
DEFAULT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Trajectory:
    n: int
    m: int
    points: np.ndarray = field(repr=False)  # (K+1, 2)
    dt: float

    @property
    def K(self) -> int:
        return len(self.points) - 1

    @property
    def duration(self) -> float:
        return self.K * self.dt


@dataclass(frozen=True, eq=False)
class PeriodicPlan:
    env: Environment
    M: int
    tau: float
    r: float
    v_max: float
    points: np.ndarray = field(repr=False)  # (N, M, K+1, 2)
    dt: np.ndarray = field(repr=False)  # (N, M)
    # target radius when r is a relaxed value
    r0: float | None = None
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        dt = np.asarray(self.dt, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dt", dt)
        N = self.env.N
        if pts.ndim != 4 or pts.shape[:2] != (N, self.M) or pts.shape[3] != 2:
            raise ValueError(f"points must have shape (N={N}, M={self.M}, K+1, 2), got {pts.shape}")
        if pts.shape[2] < 2:
            raise ValueError("trajectories need at least one segment")
        if dt.shape != (N, self.M):
            raise ValueError("dt must have shape (N, M)")
        if self.M < 1 or not self.tau > 0 or not self.v_max > 0 or self.r < 0:
            raise ValueError("need M >= 1, tau > 0, v_max > 0, r >= 0")
        if not np.all(dt > 0):
            raise ValueError("timesteps must be positive")

    @property
    def N(self) -> int:
        return self.env.N

    @property
    def K(self) -> int:
        return self.points.shape[2] - 1

    @property
    def durations(self) -> np.ndarray:
        return self.K * self.dt

    def trajectory(self, n: int, m: int) -> Trajectory:
        return Trajectory(n, m, self.points[n, m], float(self.dt[n, m]))

    @property
    def trajectories(self) -> list[list[Trajectory]]:
        return [[self.trajectory(n, m) for n in range(self.N)] for m in range(self.M)]

    def replace(self, **kw) -> "PeriodicPlan":
        return replace(self, **kw)


def position_at(traj: Trajectory, t: float) -> np.ndarray:
    T = traj.duration
    if not -1e-12 <= t <= T + 1e-12:
        raise ValueError(f"t={t} outside [0, {T}]")
    u = min(max(t / traj.dt, 0.0), traj.K)
    k = min(int(math.floor(u)), traj.K - 1)
    w = u - k
    return (1 - w) * traj.points[k] + w * traj.points[k + 1]


def residue(t, q):
    """t mod q in [0, q) with floor semantics."""
    out = t - np.floor(t / q) * q
    # rounding can land on q for tiny negative t, and t / q can underflow
    out = np.where((out >= q) | (out < 0), 0.0, out)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# collision pairs


@dataclass(frozen=True, eq=False)
class CollisionPairSet:
    """Index tuples (n, m, k, n2, m2, k2) with their interpolation weights.

    ``wrap`` is the integer w with residue = offset + w*M*tau; holding it
    fixed makes alpha a smooth function of tau and the timesteps.
    """

    idx: np.ndarray  # (P, 6) int
    alpha: np.ndarray  # (P,)
    wrap: np.ndarray  # (P,) int

    def __len__(self) -> int:
        return len(self.idx)

    def tuples(self) -> set[tuple[int, ...]]:
        return {tuple(int(v) for v in row) for row in self.idx}


def collision_pairs(plan: PeriodicPlan, eps: float = 1e-9) -> CollisionPairSet:
    """Tuples whose periodic time offset falls in the partner's segment window.

    Residues within ``eps`` (relative to the time scale) of a window edge are
    snapped to the exact value, so that rounding in ``k*dt - k2*dt2`` cannot
    pair an agent with itself at the same instant.
    """
    return _collision_pairs(plan.tau, plan.dt, plan.M, plan.K, eps)


def _collision_pairs(tau: float, dt: np.ndarray, M: int, K: int, eps: float = 1e-9) -> CollisionPairSet:
    N = dt.shape[0]
    J = N * M
    flat_dt = dt.reshape(J)
    n_of = np.repeat(np.arange(N), M)
    m_of = np.tile(np.arange(M), N)
    k = np.arange(K)
    period = M * tau
    tol = eps * max(period, K * float(flat_dt.max()), 1.0)
    idx, alpha, wrap = [], [], []
    for j in range(J):
        for j2 in range(J):
            d1, d2 = flat_dt[j], flat_dt[j2]
            x = (m_of[j] - m_of[j2]) * tau + k[:, None] * d1 - k[None, :] * d2
            fl = np.floor(x / period)
            res = x - fl * period
            top = res > period - tol
            fl = np.where(top, fl + 1, fl)
            res = np.where(top, 0.0, np.where(res < tol, 0.0, res))
            mask = res < d2 - tol
            if j == j2:
                np.fill_diagonal(mask, False)
            kk, kk2 = np.nonzero(mask)
            if len(kk) == 0:
                continue
            P = len(kk)
            block = np.empty((P, 6), dtype=np.int64)
            block[:, 0] = n_of[j]
            block[:, 1] = m_of[j]
            block[:, 2] = kk
            block[:, 3] = n_of[j2]
            block[:, 4] = m_of[j2]
            block[:, 5] = kk2
            idx.append(block)
            alpha.append(res[kk, kk2] / d2)
            wrap.append(-fl[kk, kk2].astype(np.int64))
    if not idx:
        return CollisionPairSet(np.zeros((0, 6), np.int64), np.zeros(0), np.zeros(0, np.int64))
    return CollisionPairSet(np.concatenate(idx), np.concatenate(alpha), np.concatenate(wrap))


def pair_distance(plan: PeriodicPlan, tup) -> tuple[float, float]:
    n, m, k, n2, m2, k2 = (int(v) for v in tup)
    d2 = plan.dt[n2, m2]
    x = (m - m2) * plan.tau + k * plan.dt[n, m] - k2 * d2
    alpha = residue(x, plan.M * plan.tau) / d2
    a = plan.points[n2, m2, k2]
    b = plan.points[n2, m2, k2 + 1]
    d = np.linalg.norm(plan.points[n, m, k] - ((1 - alpha) * a + alpha * b))
    return float(d), float(alpha)


# --------------------------------------------------------------------------
# exact validation


@dataclass
class Violation:
    kind: str  # endpoint | velocity | clearance | collision
    ids: tuple
    worst_margin: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ids": list(self.ids), "worst_margin": self.worst_margin}


@dataclass
class ValidationReport:
    violations: list[Violation]
    # most negative slack per constraint family (positive means satisfied)
    margins: dict[str, float]

    @property
    def ok(self) -> bool:
        return not self.violations


def closest_approach(p, vp, q, vq, t0, t1):
    """Minimum distance between p + vp*t and q + vq*t over [t0, t1], vectorized."""
    w = p - q
    dv = vp - vq
    a = np.sum(dv * dv, axis=-1)
    b = np.sum(w * dv, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ts = np.where(a > 0, -b / a, t0)
    ts = np.clip(ts, t0, t1)
    best = np.linalg.norm(w + dv * ts[..., None], axis=-1)
    e0 = np.linalg.norm(w + dv * np.asarray(t0)[..., None], axis=-1)
    e1 = np.linalg.norm(w + dv * np.asarray(t1)[..., None], axis=-1)
    return np.minimum(best, np.minimum(e0, e1))


def _pair_min_distance(P, dtp, Q, dtq, shift):
    """Closest approach of trajectory P (starting at 0) and Q (starting at
    ``shift``) over their common lifetime, or None without overlap."""
    Kp, Kq = len(P) - 1, len(Q) - 1
    lo = max(0.0, shift)
    hi = min(Kp * dtp, shift + Kq * dtq)
    if hi < lo:
        return None
    bps = np.concatenate([np.arange(Kp + 1) * dtp, shift + np.arange(Kq + 1) * dtq])
    bps = np.unique(np.clip(bps, lo, hi))
    if len(bps) == 1:
        bps = np.array([lo, hi])
    t0, t1 = bps[:-1], bps[1:]
    mid = 0.5 * (t0 + t1)
    ip = np.clip(np.floor(mid / dtp).astype(int), 0, Kp - 1)
    iq = np.clip(np.floor((mid - shift) / dtq).astype(int), 0, Kq - 1)
    vp = (P[ip + 1] - P[ip]) / dtp
    vq = (Q[iq + 1] - Q[iq]) / dtq
    # positions expressed as base + v * t in absolute time
    bp = P[ip] - vp * (ip * dtp)[:, None]
    bq = Q[iq] - vq * (shift + iq * dtq)[:, None]
    return float(closest_approach(bp, vp, bq, vq, t0, t1).min())


def validate_plan(plan: PeriodicPlan, tol: float = DEFAULT_TOL, r: float | None = None) -> ValidationReport:
    """Check endpoints, speed, boundary clearance and periodic collisions in
    continuous time.  ``r`` overrides the plan's radius (e.g. the target
    radius of a relaxed plan)."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    r = plan.r if r is None else r
    env = plan.env
    N, M, K = plan.N, plan.M, plan.K
    viol: list[Violation] = []
    margins = {}

    worst = math.inf
    for n in range(N):
        s, g = env.start(n), env.goal(n)
        for m in range(M):
            e = max(np.linalg.norm(plan.points[n, m, 0] - s), np.linalg.norm(plan.points[n, m, K] - g))
            worst = min(worst, -e)
            if e > tol:
                viol.append(Violation("endpoint", (n, m), -e))
    margins["endpoint"] = worst

    seg = np.linalg.norm(np.diff(plan.points, axis=2), axis=-1)
    speed = seg / plan.dt[:, :, None]
    slack = plan.v_max - speed
    margins["velocity"] = float(slack.min())
    for n, m, k in zip(*np.nonzero(slack < -tol)):
        viol.append(Violation("velocity", (int(n), int(m), int(k)), float(slack[n, m, k])))

    p0 = plan.points[:, :, :-1].reshape(-1, 2)
    p1 = plan.points[:, :, 1:].reshape(-1, 2)
    clear = segment_clearance(env, p0, p1).reshape(N, M, K) - r
    margins["clearance"] = float(clear.min())
    for n, m, k in zip(*np.nonzero(clear < -tol)):
        viol.append(Violation("clearance", (int(n), int(m), int(k)), float(clear[n, m, k])))

    worst = math.inf
    T = plan.durations
    cyc = M * plan.tau
    reach = int(math.ceil(T.max() / cyc)) + 1
    for n in range(N):
        for m in range(M):
            for n2 in range(N):
                for m2 in range(M):
                    for a in range(-reach, reach + 1):
                        if (n, m) == (n2, m2) and a == 0:
                            continue
                        # only count each unordered copy pair once
                        if (n2, m2, -a) < (n, m, a) and (n2, m2) != (n, m):
                            continue
                        if (n, m) == (n2, m2) and a < 0:
                            continue
                        shift = (m2 - m) * plan.tau + a * cyc
                        d = _pair_min_distance(
                            plan.points[n, m], plan.dt[n, m], plan.points[n2, m2], plan.dt[n2, m2], shift
                        )
                        if d is None:
                            continue
                        margin = d - 2 * r
                        worst = min(worst, margin)
                        if margin < -tol:
                            viol.append(Violation("collision", (n, m, n2, m2, a), margin))
    margins["collision"] = worst
    return ValidationReport(viol, margins)


# --------------------------------------------------------------------------
# plan files


def plan_to_dict(plan: PeriodicPlan) -> dict:
    d = {
        "version": 1,
        "env": plan.env.to_dict(),
        "M": plan.M,
        "N": plan.N,
        "K": plan.K,
        "tau": float(plan.tau),
        "r": float(plan.r),
        "v_max": float(plan.v_max),
    }
    if plan.r0 is not None:
        d["r0"] = float(plan.r0)
    if plan.meta:
        d["meta"] = plan.meta
    d["trajectories"] = [
        {
            "n": n,
            "m": m,
            "dt": float(plan.dt[n, m]),
            "points": plan.points[n, m].tolist(),
        }
        for n in range(plan.N)
        for m in range(plan.M)
    ]
    return d


def plan_from_dict(d: dict) -> PeriodicPlan:
    if d.get("version") != 1:
        raise ValueError(f"unsupported plan version {d.get('version')!r}")
    env = load_environment(d["env"])
    M, N, K = int(d["M"]), int(d["N"]), int(d["K"])
    if N != env.N:
        raise ValueError("N does not match the environment")
    pts = np.full((N, M, K + 1, 2), np.nan)
    dt = np.full((N, M), np.nan)
    for tr in d["trajectories"]:
        n, m = int(tr["n"]), int(tr["m"])
        pts[n, m] = np.asarray(tr["points"], dtype=float)
        dt[n, m] = float(tr["dt"])
    if np.isnan(dt).any() or np.isnan(pts).any():
        raise ValueError("plan file is missing trajectories")
    return PeriodicPlan(
        env=env,
        M=M,
        tau=float(d["tau"]),
        r=float(d["r"]),
        v_max=float(d["v_max"]),
        points=pts,
        dt=dt,
        r0=d.get("r0"),
        meta=dict(d.get("meta", {})),
    )


def save_plan(plan: PeriodicPlan, path: str | Path):
    Path(path).write_text(json.dumps(plan_to_dict(plan)) + "\n")


def load_plan(path: str | Path) -> PeriodicPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))
