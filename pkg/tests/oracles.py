"""Independent reference computations used by the tests."""
import math
from fractions import Fraction

import numpy as np


def brute_collision_pairs(tau, dt, M, K):
    """Membership predicate evaluated in exact rational arithmetic.

    ``tau`` and ``dt`` are converted exactly from their binary floats, so ties
    at the interval ends are decided without rounding.
    """
    tau = Fraction(tau)
    N = len(dt)
    dts = [[Fraction(float(dt[n][m])) for m in range(M)] for n in range(N)]
    period = M * tau
    out = set()
    for n in range(N):
        for m in range(M):
            for k in range(K):
                for n2 in range(N):
                    for m2 in range(M):
                        d2 = dts[n2][m2]
                        for k2 in range(K):
                            if (n, m, k) == (n2, m2, k2):
                                continue
                            x = (m - m2) * tau + k * dts[n][m] - k2 * d2
                            res = x - math.floor(x / period) * period
                            if 0 <= res < d2:
                                out.add((n, m, k, n2, m2, k2))
    return out


def sampled_min_distance(plan, step):
    """Smallest distance between any two agent copies on a time grid."""
    N, M, K = plan.N, plan.M, plan.K
    T = plan.durations
    cyc = M * plan.tau
    reach = int(math.ceil(T.max() / cyc)) + 1
    worst = math.inf
    for n in range(N):
        for m in range(M):
            tt = np.arange(0.0, T[n, m] + step / 2, step)
            tt = np.minimum(tt, T[n, m])
            P = _interp(plan.points[n, m], plan.dt[n, m], tt)
            for n2 in range(N):
                for m2 in range(M):
                    for a in range(-reach, reach + 1):
                        if (n, m) == (n2, m2) and a == 0:
                            continue
                        shift = (m2 - m) * plan.tau + a * cyc
                        t2 = tt - shift
                        ok = (t2 >= 0) & (t2 <= T[n2, m2])
                        if not ok.any():
                            continue
                        Q = _interp(plan.points[n2, m2], plan.dt[n2, m2], t2[ok])
                        worst = min(worst, float(np.linalg.norm(P[ok] - Q, axis=1).min()))
    return worst


def _interp(pts, dt, t):
    K = len(pts) - 1
    u = np.clip(t / dt, 0, K)
    k = np.minimum(np.floor(u).astype(int), K - 1)
    w = (u - k)[:, None]
    return (1 - w) * pts[k] + w * pts[k + 1]


def sampled_min_clearance(plan, samples_per_segment=200):
    from pmapp.geometry import distance_to_boundary

    w = np.linspace(0, 1, samples_per_segment)[:, None]
    best = math.inf
    for n in range(plan.N):
        for m in range(plan.M):
            P = plan.points[n, m]
            for k in range(plan.K):
                q = (1 - w) * P[k] + w * P[k + 1]
                best = min(best, float(np.min(distance_to_boundary(plan.env, q))))
    return best


def bellman_times(verts, edges):
    """Longest path from the zero-time sources by plain relaxation."""
    t = {v: (0.0 if v[2] == 0 else -math.inf) for v in verts}
    for _ in range(len(verts) + 1):
        changed = False
        for u, v, w in edges:
            if t[u] + w > t[v] + 1e-12:
                t[v] = t[u] + w
                changed = True
        if not changed:
            return t
    raise AssertionError("positive cycle")


def central_jacobian(fun, z, h=1e-6):
    cols = []
    lo_hi = []
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = h
        fp, fm = fun(z + e), fun(z - e)
        cols.append((fp - fm) / (2 * h))
        lo_hi.append((fp, fm))
    return np.column_stack(cols), lo_hi
