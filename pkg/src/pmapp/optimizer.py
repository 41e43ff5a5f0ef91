"""Penalty objective and Levenberg-Marquardt refinement of periodic plans.

The decision vector stacks interior waypoints, log timesteps, log period and
the radius.  Residuals are ordered as

    period | smoothness (N*M*K) | radius | speed hinges (N*M*K)
    | clearance hinges (N*M*(K+1)) | corner hinges (N*M*K)
    | approach hinges (K per listed copy pair)
    | collision hinges (len(pairs))

so that their squared sum is the penalty objective.  The approach block is
empty unless the exact check has flagged copy pairs (see ``lm_minimize``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .geometry import boundary_distance_and_gradient, corner_distance_and_gradient
from .planmodel import CollisionPairSet, PeriodicPlan, collision_pairs, validate_plan

log = logging.getLogger(__name__)

# distance below which the reciprocal barriers continue linearly
BARRIER_KNEE = 0.05
LAMBDA_MAX = 1e20


class OptimizerError(RuntimeError):
    pass


class Diverged(OptimizerError):
    pass


class NonfiniteResidual(OptimizerError):
    pass


@dataclass
class PenaltyWeights:
    sigma_t: float = 1.0
    sigma_r: float = 1e4
    sigma_v: float = 1e4
    sigma_o: float = 1e4
    sigma_c: float = 1e4

    def __post_init__(self):
        if min(self.sigma_t, self.sigma_r, self.sigma_v, self.sigma_o, self.sigma_c) < 0:
            raise ValueError("penalty weights must be nonnegative")

    def annealed(self, factor: float) -> "PenaltyWeights":
        return PenaltyWeights(
            self.sigma_t / factor,
            self.sigma_r * factor,
            self.sigma_v * factor,
            self.sigma_o * factor,
            self.sigma_c * factor,
        )


@dataclass
class AnnealSchedule:
    phase1_iters: int = 500
    phase2_iters: int = 39500
    phase2_refresh_stride: int = 10
    phase3_iters: int = 1000
    anneal_factor: float = 1.01
    convergence_window: int = 100
    convergence_eps: float = 1e-6
    max_iters: int = 50_000
    initial: PenaltyWeights = field(default_factory=PenaltyWeights)

    def __post_init__(self):
        counts = (self.phase1_iters, self.phase2_iters, self.phase2_refresh_stride,
                  self.phase3_iters, self.convergence_window, self.max_iters)
        if min(counts) < 0 or self.phase2_refresh_stride < 1 or self.convergence_window < 1:
            raise ValueError("iteration counts must be positive")
        if not self.anneal_factor > 1:
            raise ValueError("anneal_factor must exceed 1")

    def phase(self, it: int) -> int:
        if it < self.phase1_iters:
            return 1
        it -= self.phase1_iters
        if it < self.phase2_iters:
            return 2
        it -= self.phase2_iters
        return 3 if it < self.phase3_iters else 4

    def refresh_due(self, it: int) -> bool:
        if self.phase(it) != 2:
            return True
        return (it - self.phase1_iters) % self.phase2_refresh_stride == 0

    def settled(self, costs) -> bool:
        """True once the cost moved less than ``convergence_eps`` per
        iteration, relative to its size, across the last window."""
        w = self.convergence_window
        if len(costs) <= w:
            return False
        scale = max(1.0, abs(costs[-1]))
        return abs(costs[-1 - w] - costs[-1]) <= self.convergence_eps * w * scale


@dataclass
class Problem:
    """Fixed data of an optimization: the plan skeleton and constants."""

    plan: PeriodicPlan
    r0: float
    clearance_margin: float = 0.0
    collision_margin: float = 0.0
    speed_margin: float = 0.0
    # copy pairs (n, m, n2, m2, a) checked by exact closest approach
    approach: list = field(default_factory=list)
    approach_margin: float = 0.01

    def __post_init__(self):
        p = self.plan
        self.N, self.M, self.K = p.N, p.M, p.K
        self.J = self.N * self.M
        self.n_pts = self.J * (self.K - 1) * 2
        self.i_logdt = self.n_pts
        self.i_logtau = self.n_pts + self.J
        self.i_r = self.i_logtau + 1
        self.size = self.i_r + 1
        col = -np.ones((self.N, self.M, self.K + 1, 2), dtype=np.int64)
        col[:, :, 1:-1] = np.arange(self.n_pts).reshape(self.N, self.M, self.K - 1, 2)
        self.point_cols = col

    def pack(self, plan: PeriodicPlan, r: float) -> np.ndarray:
        z = np.empty(self.size)
        z[: self.n_pts] = plan.points[:, :, 1:-1].ravel()
        z[self.i_logdt : self.i_logtau] = np.log(plan.dt.ravel())
        z[self.i_logtau] = math.log(plan.tau)
        z[self.i_r] = r
        return z

    def unpack(self, z: np.ndarray):
        pts = self.plan.points.copy()
        pts[:, :, 1:-1] = z[: self.n_pts].reshape(self.N, self.M, self.K - 1, 2)
        dt = np.exp(z[self.i_logdt : self.i_logtau]).reshape(self.N, self.M)
        return pts, dt, math.exp(z[self.i_logtau]), float(z[self.i_r])

    def to_plan(self, z: np.ndarray, r: float | None = None) -> PeriodicPlan:
        pts, dt, tau, rz = self.unpack(z)
        return replace(self.plan, points=pts, dt=dt, tau=tau, r=max(rz, 0.0) if r is None else r)


def barrier(d, limit: float, knee: float = BARRIER_KNEE):
    """Hinge max(0, 1/d - 1/limit) and its derivative in d.

    Below ``knee`` the reciprocal is replaced by its tangent line, which keeps
    the penalty finite for touching or overlapping geometry.
    """
    d = np.asarray(d, float)
    inv = np.where(d > knee, 1.0 / np.maximum(d, knee), 2.0 / knee - d / knee**2)
    dinv = np.where(d > knee, -1.0 / np.maximum(d, knee) ** 2, -1.0 / knee**2)
    h = inv - 1.0 / limit
    act = h > 0
    return np.where(act, h, 0.0), np.where(act, dinv, 0.0)


def segment_approach(P, dtp, Q, dtq, shift):
    """Closest approach of copy P (starting at 0) and copy Q (starting at
    ``shift``) within each segment of P, with what its derivatives need.

    Returns ``(k, dist, parts)`` over the segments of P that overlap Q in
    time, or None.  ``parts`` holds the separation vector ``y`` at the
    minimizing time, the segment indices and interpolation weights there, and
    the derivative of ``y`` with respect to the log timesteps and log period.
    An interior minimizer contributes no time derivative (the distance is
    stationary in t); one sitting on a waypoint time moves with that
    waypoint's timestep or with the shift.
    """
    Kp, Kq = len(P) - 1, len(Q) - 1
    lo = max(0.0, shift)
    hi = min(Kp * dtp, shift + Kq * dtq)
    if hi <= lo:
        return None
    ta = np.arange(Kp + 1) * dtp
    tb = shift + np.arange(Kq + 1) * dtq
    times = np.concatenate([ta, tb])
    kind = np.concatenate([np.zeros(Kp + 1, int), np.ones(Kq + 1, int)])
    inside = (times > lo) & (times < hi)
    # the ends of the overlap are waypoint times of one of the two copies
    lo_kind = 0 if shift <= 0 else 1
    hi_kind = 0 if Kp * dtp <= shift + Kq * dtq else 1
    order = np.argsort(times[inside], kind="stable")
    bps = np.concatenate([[lo], times[inside][order], [hi]])
    bkind = np.concatenate([[lo_kind], kind[inside][order], [hi_kind]])
    t0, t1 = bps[:-1], bps[1:]
    keep = t1 > t0
    t0, t1, k0, k1 = t0[keep], t1[keep], bkind[:-1][keep], bkind[1:][keep]
    if not len(t0):
        return None
    mid = 0.5 * (t0 + t1)
    ip = np.clip(np.floor(mid / dtp).astype(int), 0, Kp - 1)
    iq = np.clip(np.floor((mid - shift) / dtq).astype(int), 0, Kq - 1)
    vA = (P[ip + 1] - P[ip]) / dtp
    vB = (Q[iq + 1] - Q[iq]) / dtq
    w0 = (P[ip] + vA * (t0 - ip * dtp)[:, None]) - (Q[iq] + vB * (t0 - shift - iq * dtq)[:, None])
    dv = vA - vB
    aa = np.sum(dv * dv, axis=1)
    bb = np.sum(w0 * dv, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(aa > 0, -bb / aa, 0.0)
    span = t1 - t0
    s = np.clip(s, 0.0, span)
    at_lo, at_hi = s <= 0.0, s >= span
    t = t0 + s
    y = w0 + dv * s[:, None]
    dist = np.linalg.norm(y, axis=1)

    # smallest piece per segment of P
    best = {}
    for j in np.lexsort((dist, ip)):
        best.setdefault(int(ip[j]), j)
    sel = np.array([best[k] for k in sorted(best)])
    ip, iq, t, y, dist, vA, vB, dv = ip[sel], iq[sel], t[sel], y[sel], dist[sel], vA[sel], vB[sel], dv[sel]
    bk = np.where(at_lo[sel], k0[sel], np.where(at_hi[sel], k1[sel], -1))

    uA = t / dtp - ip
    uB = (t - shift) / dtq - iq
    # explicit parameter dependence at fixed t
    d_logdtp = -t[:, None] * vA
    d_logdtq = (t - shift)[:, None] * vB
    d_logtau = shift * vB
    # the minimizing time itself moves when pinned to a waypoint time
    on_a, on_b = (bk == 0)[:, None], (bk == 1)[:, None]
    d_logdtp = d_logdtp + np.where(on_a, dv * t[:, None], 0.0)
    d_logdtq = d_logdtq + np.where(on_b, dv * (t - shift)[:, None], 0.0)
    d_logtau = d_logtau + np.where(on_b, dv * shift, 0.0)
    parts = dict(y=y, ip=ip, iq=iq, uA=uA, uB=uB, d_logdtp=d_logdtp, d_logdtq=d_logdtq, d_logtau=d_logtau)
    return ip, dist, parts


def _sqrt(x):
    return math.sqrt(max(x, 0.0))


def evaluate(prob: Problem, z: np.ndarray, weights: PenaltyWeights, pairs: CollisionPairSet,
             jac: bool = True):
    """Residual vector and (optionally) its sparse Jacobian at z.

    Collision tuples and their wrap integers are held fixed; alpha follows
    tau and the timesteps smoothly.
    """
    N, M, K = prob.N, prob.M, prob.K
    env = prob.plan.env
    vmax = prob.plan.v_max
    pts, dt, tau, r = prob.unpack(z)
    cols = prob.point_cols
    rows_i, cols_i, vals = [], [], []
    res = []
    row0 = 0

    def emit(rr, cc, vv):
        rr, cc, vv = np.broadcast_arrays(np.asarray(rr), np.asarray(cc), np.asarray(vv, float))
        keep = cc >= 0
        rows_i.append(rr[keep].ravel())
        cols_i.append(cc[keep].ravel())
        vals.append(vv[keep].ravel())

    # period
    res.append(np.array([tau - 2 * r / vmax]))
    if jac:
        emit([0, 0], [prob.i_logtau, prob.i_r], [tau, -2 / vmax])
    row0 = 1

    # segment speeds, shared by smoothness and speed hinges
    diff = pts[:, :, 1:] - pts[:, :, :-1]  # (N, M, K, 2)
    length = np.linalg.norm(diff, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(length[..., None] > 0, diff / length[..., None], 0.0)
    speed = length / dt[:, :, None]
    seg_rows = np.arange(N * M * K).reshape(N, M, K)
    dt_cols = prob.i_logdt + np.arange(N * M).reshape(N, M)
    c_lo, c_hi = cols[:, :, :-1], cols[:, :, 1:]  # (N, M, K, 2)
    dvdx = unit / dt[:, :, None, None]

    def speed_block(scale, active):
        base = row0
        vv = scale * speed * active
        res.append(vv.ravel())
        if jac:
            r_ = (base + seg_rows)[..., None]
            a = active[..., None]
            emit(r_, c_hi, scale * dvdx * a)
            emit(r_, c_lo, -scale * dvdx * a)
            emit(base + seg_rows, np.broadcast_to(dt_cols[:, :, None], seg_rows.shape), -scale * speed * active)

    speed_block(_sqrt(weights.sigma_t / K), np.ones_like(speed))
    row0 += N * M * K

    # radius
    res.append(np.array([_sqrt(weights.sigma_r) * (r - prob.r0)]))
    if jac:
        emit([row0], [prob.i_r], [_sqrt(weights.sigma_r)])
    row0 += 1

    # speed hinges
    vlim = vmax - prob.speed_margin
    active = (speed > vlim).astype(float)
    sv = _sqrt(weights.sigma_v / K)
    res.append((sv * np.maximum(0.0, speed - vlim)).ravel())
    if jac:
        r_ = (row0 + seg_rows)[..., None]
        a = active[..., None]
        emit(r_, c_hi, sv * dvdx * a)
        emit(r_, c_lo, -sv * dvdx * a)
        emit(row0 + seg_rows, np.broadcast_to(dt_cols[:, :, None], seg_rows.shape), -sv * speed * active)
    row0 += N * M * K

    # boundary clearance hinges
    flat = pts.reshape(-1, 2)
    d, grad = boundary_distance_and_gradient(env, flat)
    ro = r + prob.clearance_margin
    if ro <= 0:
        raise NonfiniteResidual("clearance threshold must be positive")
    so = _sqrt(weights.sigma_o / K)
    h, dh = barrier(d, ro)
    res.append(so * h)
    if jac:
        rr = row0 + np.arange(len(flat))
        emit(rr[:, None], cols.reshape(-1, 2), so * dh[:, None] * grad)
        emit(rr, prob.i_r, np.where(h > 0, so / ro**2, 0.0))
    row0 += len(flat)

    # segments passing reflex corners between their waypoints
    d, s, grad = corner_distance_and_gradient(env, pts[:, :, :-1].reshape(-1, 2), pts[:, :, 1:].reshape(-1, 2))
    h, dh = barrier(d, ro)
    res.append(so * h)
    if jac:
        rr = row0 + seg_rows.reshape(-1)
        g = (so * dh)[:, None] * grad
        emit(rr[:, None], c_lo.reshape(-1, 2), (1 - s)[:, None] * g)
        emit(rr[:, None], c_hi.reshape(-1, 2), s[:, None] * g)
        emit(rr, prob.i_r, np.where(h > 0, so / ro**2, 0.0))
    row0 += N * M * K

    # exact closest approach of flagged copy pairs, one row per segment of
    # the first copy
    sc = _sqrt(weights.sigma_c / K)
    if prob.approach:
        ra = 2 * r + prob.approach_margin
        for i, (n, m, n2, m2, a) in enumerate(prob.approach):
            shift = ((m2 - m) + a * M) * tau
            hit = segment_approach(pts[n, m], dt[n, m], pts[n2, m2], dt[n2, m2], shift)
            h = np.zeros(K)
            if hit is not None:
                kk, dist, dy = hit
                hh, dh = barrier(dist, ra)
                h[kk] = sc * hh
                if jac:
                    rr = row0 + kk
                    with np.errstate(invalid="ignore", divide="ignore"):
                        e = np.where((dist > 0)[:, None], dy["y"] / dist[:, None], 0.0)
                    g = (sc * dh)[:, None] * e  # d(residual)/dy
                    ip, iq = dy["ip"], dy["iq"]
                    emit(rr[:, None], cols[n, m, ip], (1 - dy["uA"])[:, None] * g)
                    emit(rr[:, None], cols[n, m, ip + 1], dy["uA"][:, None] * g)
                    emit(rr[:, None], cols[n2, m2, iq], -(1 - dy["uB"])[:, None] * g)
                    emit(rr[:, None], cols[n2, m2, iq + 1], -dy["uB"][:, None] * g)
                    emit(rr, dt_cols[n, m], np.sum(g * dy["d_logdtp"], axis=1))
                    emit(rr, dt_cols[n2, m2], np.sum(g * dy["d_logdtq"], axis=1))
                    emit(rr, prob.i_logtau, np.sum(g * dy["d_logtau"], axis=1))
                    emit(rr, prob.i_r, np.where(hh > 0, 2 * sc / ra**2, 0.0))
            res.append(h)
            row0 += K

    # periodic collision hinges
    P = len(pairs)
    rc = 2 * r + prob.collision_margin
    if P:
        n, m, k, n2, m2, k2 = pairs.idx.T
        w = pairs.wrap
        dt1, dt2 = dt[n, m], dt[n2, m2]
        shift = (m - m2 + w * M) * tau
        alpha = (shift + k * dt1) / dt2 - k2
        x = pts[n, m, k]
        xa, xb = pts[n2, m2, k2], pts[n2, m2, k2 + 1]
        y = x - ((1 - alpha)[:, None] * xa + alpha[:, None] * xb)
        dist = np.linalg.norm(y, axis=1)
        h, dh = barrier(dist, rc)
        res.append(sc * h)
        if jac:
            rr = row0 + np.arange(P)
            with np.errstate(invalid="ignore", divide="ignore"):
                e = np.where((dist > 0)[:, None], y / dist[:, None], 0.0)
            coef = -sc * dh  # d(residual)/d(dist) = -coef
            emit(rr[:, None], cols[n, m, k], -coef[:, None] * e)
            emit(rr[:, None], cols[n2, m2, k2], (coef * (1 - alpha))[:, None] * e)
            emit(rr[:, None], cols[n2, m2, k2 + 1], (coef * alpha)[:, None] * e)
            dres_dalpha = coef * np.sum(e * (xb - xa), axis=1)
            emit(rr, prob.i_logtau, dres_dalpha * shift / dt2)
            emit(rr, dt_cols[n, m], dres_dalpha * k * dt1 / dt2)
            emit(rr, dt_cols[n2, m2], -dres_dalpha * (alpha + k2))
            emit(rr, prob.i_r, np.where(h > 0, 2 * sc / rc**2, 0.0))
    row0 += P

    f = np.concatenate(res)
    if not np.all(np.isfinite(f)):
        bad = int(np.flatnonzero(~np.isfinite(f))[0])
        raise NonfiniteResidual(f"nonfinite residual at row {bad}")
    if not jac:
        return f, None
    Jm = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows_i), np.concatenate(cols_i))),
        shape=(row0, prob.size),
    )
    return f, Jm


def residual_vector(plan, weights, pairs, r0=0.5, **margins):
    prob = Problem(plan, r0, **margins)
    return evaluate(prob, prob.pack(plan, plan.r), weights, pairs, jac=False)[0]


def jacobian(plan, weights, pairs, r0=0.5, **margins):
    prob = Problem(plan, r0, **margins)
    return evaluate(prob, prob.pack(plan, plan.r), weights, pairs, jac=True)[1]


def objective(plan: PeriodicPlan, weights: PenaltyWeights, pairs: CollisionPairSet, r0: float) -> float:
    """The penalty objective written out term by term (no margins)."""
    K, vmax, r, tau = plan.K, plan.v_max, plan.r, plan.tau
    v = np.linalg.norm(np.diff(plan.points, axis=2), axis=-1) / plan.dt[:, :, None]
    V = (tau - 2 * r / vmax) ** 2 + weights.sigma_t / K * np.sum(v**2)
    c = weights.sigma_r * (r - r0) ** 2
    c += weights.sigma_v / K * np.sum(np.maximum(0, v - vmax) ** 2)
    d, _ = boundary_distance_and_gradient(plan.env, plan.points.reshape(-1, 2))
    c += weights.sigma_o / K * np.sum(barrier(d, r)[0] ** 2)
    dc, _, _ = corner_distance_and_gradient(plan.env, plan.points[:, :, :-1].reshape(-1, 2),
                                            plan.points[:, :, 1:].reshape(-1, 2))
    c += weights.sigma_o / K * np.sum(barrier(dc, r)[0] ** 2)
    total = 0.0
    for row, wrap in zip(pairs.idx, pairs.wrap):
        n, m, k, n2, m2, k2 = (int(q) for q in row)
        off = (m - m2 + wrap * plan.M) * tau + k * plan.dt[n, m] - k2 * plan.dt[n2, m2]
        a = off / plan.dt[n2, m2]
        p = (1 - a) * plan.points[n2, m2, k2] + a * plan.points[n2, m2, k2 + 1]
        dist = float(np.linalg.norm(plan.points[n, m, k] - p))
        total += float(barrier(dist, 2 * r)[0]) ** 2
    c += weights.sigma_c / K * total
    return float(V + c)


def refresh_pairs(plan: PeriodicPlan) -> CollisionPairSet:
    return collision_pairs(plan)


# --------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class TraceRow:
    iteration: int
    cost: float
    tau: float
    r: float
    active_pairs: int


@dataclass
class OptimizeResult:
    plan: PeriodicPlan
    trace: list[TraceRow]
    converged: bool
    iterations: int
    r_opt: float
    report: object = None

    @property
    def status(self) -> str:
        return "converged" if self.converged else "max-iterations"


@dataclass
class LMState:
    z: np.ndarray
    # relative seed; the absolute damping is set from the first Hessian
    seed: float = 1e-3
    lam: float | None = None
    stalls: int = 0
    weights: object = None


def lm_step(prob, state: LMState, weights, pairs, f, Jm, max_tries: int = 20,
            max_log_time_step: float = 0.05, factor: float = 3.0):
    """One damped Gauss-Newton iteration; returns (accepted, f, J).

    The damping is an isotropic ``lam * I``.  Scaling it by the Hessian
    diagonal stalls on the period, whose column collects every pair term.
    Steps are shortened so no log timestep or log period moves by more than
    ``max_log_time_step``; larger jumps would leave the frozen pair set stale.
    """
    A = (Jm.T @ Jm).toarray()
    g = Jm.T @ f
    cost = float(f @ f)
    if not np.any(g):
        return False, f, Jm
    if state.lam is not None and state.lam >= LAMBDA_MAX:
        # stuck at the cap: re-seed when the weights move, or now and then
        state.stalls += 1
        if weights != state.weights or state.stalls % 50 == 0:
            state.lam = None
    state.weights = weights
    if state.lam is None:
        state.lam = state.seed * max(float(np.diag(A).max()), 1.0)
    eye = np.eye(len(g))
    for _ in range(max_tries):
        try:
            step = scipy.linalg.solve(A + state.lam * eye, -g, assume_a="pos", check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            state.lam = min(state.lam * factor, LAMBDA_MAX)
            continue
        dtime = np.abs(step[prob.i_logdt : prob.i_r]).max()
        if dtime > max_log_time_step:
            step *= max_log_time_step / dtime
        z_new = state.z + step
        try:
            f_new, _ = evaluate(prob, z_new, weights, pairs, jac=False)
        except NonfiniteResidual:
            state.lam = min(state.lam * factor, LAMBDA_MAX)
            continue
        if float(f_new @ f_new) < cost:
            state.z = z_new
            state.lam = max(state.lam / factor, 1e-12)
            f2, J2 = evaluate(prob, z_new, weights, pairs, jac=True)
            return True, f2, J2
        if state.lam >= LAMBDA_MAX:
            break  # no descent even for a vanishing step
        state.lam = min(state.lam * factor, LAMBDA_MAX)
    return False, f, Jm


def lm_minimize(
    plan: PeriodicPlan,
    schedule: AnnealSchedule | None = None,
    seed_damping: float = 1e-3,
    r0: float | None = None,
    r_init: float = 1e-3,
    clearance_margin: float = 0.03,
    collision_margin: float = 0.06,
    speed_margin: float = 1e-4,
    repair_rounds: int = 6,
    repair_pad: float = 0.005,
    check_tol: float = 1e-3,
    screen_stride: int = 200,
    callback=None,
) -> OptimizeResult:
    """Deform a relaxed plan into a feasible plan with a small period.

    The margins pad the discretized clearance, collision and speed limits so
    the continuous-time motion between samples also stays feasible.  From
    the second phase on, every ``screen_stride`` iterations, copy pairs that
    the exact check finds closer than the approach limit get closest-approach
    terms.  After convergence the plan is checked exactly and the last phase is rerun, up
    to ``repair_rounds`` times: copy pairs that collide between samples get
    exact closest-approach terms, and a violated clearance or speed margin
    grows by the deficit.
    """
    schedule = schedule or AnnealSchedule()
    if r0 is None:
        r0 = plan.r0 if plan.r0 is not None else plan.r
    r_start = plan.r if plan.r > 0 else r_init
    prob = Problem(plan, r0, clearance_margin, collision_margin, speed_margin)
    state = LMState(prob.pack(plan, r_start), seed_damping)
    weights = schedule.initial
    trace: list[TraceRow] = []
    pairs = refresh_pairs(prob.to_plan(state.z))
    f, Jm = evaluate(prob, state.z, weights, pairs)
    converged = False
    it = 0

    def record():
        _, _, tau, r = prob.unpack(state.z)
        cost = float(f @ f)
        if not math.isfinite(cost):
            raise Diverged(f"cost became nonfinite at iteration {it}")
        active = int(np.count_nonzero(f[len(f) - len(pairs):])) if len(pairs) else 0
        trace.append(TraceRow(it, cost, tau, r, active))
        if callback is not None:
            callback(trace[-1])

    def screen():
        """Give copy pairs that come too close between samples exact terms."""
        nonlocal f, Jm
        r_now = max(float(state.z[prob.i_r]), 0.0)
        rep = validate_plan(prob.to_plan(state.z), tol=0.0, r=r_now + prob.approach_margin / 2)
        new = [v.ids for v in rep.violations if v.kind == "collision" and v.ids not in prob.approach]
        if new:
            prob.approach.extend(new)
            f, Jm = evaluate(prob, state.z, weights, pairs)
        return bool(new)

    def run_until_converged(limit):
        nonlocal f, Jm, pairs, it
        costs = []
        while it < limit:
            if screen_stride and it % screen_stride == 0 and screen():
                costs = []
            pairs = refresh_pairs(prob.to_plan(state.z))
            f, Jm = evaluate(prob, state.z, weights, pairs)
            _, f, Jm = lm_step(prob, state, weights, pairs, f, Jm)
            record()
            it += 1
            costs.append(trace[-1].cost)
            if schedule.settled(costs):
                return True
        return False

    annealed_end = schedule.phase1_iters + schedule.phase2_iters + schedule.phase3_iters
    while it < min(annealed_end, schedule.max_iters):
        if screen_stride and it >= schedule.phase1_iters and it % screen_stride == 0:
            screen()
        if schedule.refresh_due(it):
            pairs = refresh_pairs(prob.to_plan(state.z))
            f, Jm = evaluate(prob, state.z, weights, pairs)
        _, f, Jm = lm_step(prob, state, weights, pairs, f, Jm)
        if schedule.phase(it) == 3:
            weights = weights.annealed(schedule.anneal_factor)
            f, Jm = evaluate(prob, state.z, weights, pairs)
        record()
        it += 1

    converged = run_until_converged(schedule.max_iters)
    report = validate_plan(prob.to_plan(state.z, r=r0), tol=check_tol)
    rounds = 0
    while converged and not report.ok and rounds < repair_rounds:
        rounds += 1
        kinds = {v.kind for v in report.violations}
        if "clearance" in kinds:
            prob.clearance_margin += -report.margins["clearance"] + repair_pad
        for v in report.violations:
            if v.kind == "collision" and v.ids not in prob.approach:
                prob.approach.append(v.ids)
        if "velocity" in kinds:
            prob.speed_margin += -report.margins["velocity"] + 1e-4
        log.info("repair round %d: margins clearance=%.3g speed=%.3g, %d copy pairs checked exactly",
                 rounds, prob.clearance_margin, prob.speed_margin, len(prob.approach))
        f, Jm = evaluate(prob, state.z, weights, pairs)
        converged = run_until_converged(schedule.max_iters)
        report = validate_plan(prob.to_plan(state.z, r=r0), tol=check_tol)

    r_opt = float(state.z[prob.i_r])
    final = prob.to_plan(state.z, r=r0)
    meta = dict(plan.meta)
    meta.pop("relaxed", None)
    meta.update(
        r_opt=r_opt,
        iterations=it,
        converged=converged,
        margins=[prob.clearance_margin, prob.collision_margin, prob.speed_margin],
        exact_pairs=[list(c) for c in prob.approach],
    )
    final = replace(final, r0=None, meta=meta)
    return OptimizeResult(final, trace, converged, it, r_opt, report)
