"""2D environments, boundary clearance and reference paths.

Scenes are polygons built from axis-aligned road arms meeting at the
origin.  Streams are numbered from 0.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from shapely.geometry import LineString, Point, Polygon

SCENE_KINDS = (
    "two-one-way-crossing",
    "one-way-two-way-crossing",
    "two-way-crossing-small",
    "two-way-crossing-large",
    "t-junction-small",
    "t-junction-large",
)


class GeometryError(ValueError):
    pass


class InvalidSpec(GeometryError):
    pass


class Unreachable(GeometryError):
    pass


class DegenerateOverlap(GeometryError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    road_half_width: float = 1.5
    arm_length: float = 5.0
    lane_offset: float = 0.75
    # distance of starts/goals from the open end of their arm
    endpoint_inset: float = 1.0
    agent_radius: float = 0.5

    def check(self):
        if self.kind not in SCENE_KINDS:
            raise InvalidSpec(f"unknown scene kind {self.kind!r}")
        if self.arm_length <= 0:
            raise InvalidSpec("arm_length must be positive")
        if self.road_half_width < self.agent_radius:
            raise InvalidSpec("road_half_width must be at least the agent radius")
        if not 0 <= self.lane_offset < self.road_half_width:
            raise InvalidSpec("lane_offset must lie in [0, road_half_width)")
        if not 0 < self.endpoint_inset < self.arm_length:
            raise InvalidSpec("endpoint_inset must lie in (0, arm_length)")


@dataclass(frozen=True)
class Environment:
    name: str
    polygon: tuple[tuple[float, float], ...]
    endpoints: tuple[tuple[tuple[float, float], tuple[float, float]], ...]

    def __post_init__(self):
        if len(self.endpoints) < 1:
            raise GeometryError("an environment needs at least one start/goal pair")
        if len(self.polygon) < 3:
            raise GeometryError("polygon needs at least three vertices")
        starts = [s for s, _ in self.endpoints]
        goals = [g for _, g in self.endpoints]
        if len(set(starts)) != len(starts) or len(set(goals)) != len(goals):
            raise GeometryError("starts and goals must be pairwise distinct")
        for p in starts + goals:
            if distance_to_boundary(self, p) <= 0:
                raise Unreachable(f"endpoint {p} is not strictly inside the free space")

    @property
    def N(self) -> int:
        return len(self.endpoints)

    @cached_property
    def vertices(self) -> np.ndarray:
        return np.asarray(self.polygon, dtype=float)

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        a = self.vertices
        return a, np.roll(a, -1, axis=0)

    @cached_property
    def shape(self) -> Polygon:
        return Polygon(self.polygon)

    def start(self, n: int) -> np.ndarray:
        return np.asarray(self.endpoints[n][0], dtype=float)

    def goal(self, n: int) -> np.ndarray:
        return np.asarray(self.endpoints[n][1], dtype=float)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "polygon": [list(p) for p in self.polygon],
            "endpoints": [{"start": list(s), "goal": list(g)} for s, g in self.endpoints],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        return cls(
            name=str(d.get("name", "custom")),
            polygon=tuple((float(x), float(y)) for x, y in d["polygon"]),
            endpoints=tuple(
                (tuple(map(float, e["start"])), tuple(map(float, e["goal"])))
                for e in d["endpoints"]
            ),
        )


@dataclass(frozen=True)
class ReferencePath:
    vertices: np.ndarray = field(repr=False)

    @cached_property
    def cumulative(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Point at arc length ``s`` (clipped to the path)."""
        cum = self.cumulative
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(cum) - 2)
        seg = cum[i + 1] - cum[i]
        w = 0.0 if seg == 0 else (s - cum[i]) / seg
        return (1 - w) * self.vertices[i] + w * self.vertices[i + 1]

    def subpath(self, s0: float, s1: float) -> np.ndarray:
        """Polyline between arc lengths s0 < s1, including interior bends."""
        cum = self.cumulative
        inner = [self.vertices[i] for i in range(len(cum)) if s0 < cum[i] < s1]
        return np.array([self.point_at(s0), *inner, self.point_at(s1)])


# --------------------------------------------------------------------------
# scenes


def _cross_polygon(w: float, L: float, arms: str) -> list[tuple[float, float]]:
    """Union of a central square and axis-aligned arms, counter-clockwise.

    ``arms`` is a subset of "ESWN"; each arm reaches distance L from the origin.
    """
    pts = []
    # walk the corners counter-clockwise starting at the south-east inner corner
    if "E" in arms:
        pts += [(w, -w), (L, -w), (L, w), (w, w)]
    else:
        pts += [(w, -w), (w, w)]
    if "N" in arms:
        pts += [(w, L), (-w, L)]
    pts.append((-w, w))
    if "W" in arms:
        pts += [(-L, w), (-L, -w)]
    pts.append((-w, -w))
    if "S" in arms:
        pts += [(-w, -L), (w, -L)]
    # drop consecutive duplicates and collinear points on straight edges
    out = []
    for p in pts:
        if not out or out[-1] != p:
            out.append(p)
    if out[0] == out[-1]:
        out.pop()
    cleaned = []
    n = len(out)
    for i in range(n):
        a, b, c = out[i - 1], out[i], out[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if abs(cross) > 1e-12:
            cleaned.append(b)
    return cleaned


def build_environment(spec: SceneSpec, name: str | None = None) -> Environment:
    spec.check()
    w, lo = spec.road_half_width, spec.lane_offset
    L = w + spec.arm_length
    e = L - spec.endpoint_inset
    kind = spec.kind
    if kind == "two-one-way-crossing":
        arms = "ESWN"
        ends = [((-e, 0.0), (e, 0.0)), ((0.0, -e), (0.0, e))]
    elif kind == "one-way-two-way-crossing":
        arms = "ESWN"
        ends = [((-e, -lo), (e, -lo)), ((e, lo), (-e, lo)), ((0.0, -e), (0.0, e))]
    elif kind.startswith("two-way-crossing"):
        arms = "ESWN"
        ends = [
            ((-e, -lo), (e, -lo)),
            ((e, lo), (-e, lo)),
            ((lo, -e), (lo, e)),
            ((-lo, e), (-lo, -e)),
        ]
    else:
        arms = "ESW"
        # straight through, and the two left turns into/out of the stem
        ends = [((-e, -lo), (e, -lo)), ((e, lo), (-lo, -e)), ((lo, -e), (-e, lo))]
    poly = tuple((float(x), float(y)) for x, y in _cross_polygon(w, L, arms))
    ends = tuple((tuple(map(float, s)), tuple(map(float, g))) for s, g in ends)
    return Environment(name=name or kind, polygon=poly, endpoints=ends)


BUILTIN_SCENES = {
    "a": SceneSpec("two-one-way-crossing"),
    "b": SceneSpec("one-way-two-way-crossing"),
    "c": SceneSpec("two-way-crossing-small"),
    "d": SceneSpec("two-way-crossing-large", road_half_width=2.25, lane_offset=1.0),
    "e": SceneSpec("t-junction-small"),
    "f": SceneSpec("t-junction-large", road_half_width=2.25, lane_offset=1.0),
}


def builtin_environment(name: str) -> Environment:
    try:
        spec = BUILTIN_SCENES[name]
    except KeyError:
        raise GeometryError(f"unknown built-in scene {name!r}") from None
    return build_environment(spec, name=name)


def load_environment(ref: str | dict) -> Environment:
    """Resolve a built-in scene name, an inline dict, or a JSON file path."""
    if isinstance(ref, dict):
        return Environment.from_dict(ref)
    if ref in BUILTIN_SCENES:
        return builtin_environment(ref)
    path = Path(ref)
    if not path.exists():
        raise FileNotFoundError(ref)
    return Environment.from_dict(json.loads(path.read_text()))


def save_environment(env: Environment, path: str | Path):
    Path(path).write_text(json.dumps(env.to_dict(), indent=1) + "\n")


# --------------------------------------------------------------------------
# distances


def point_segment_distance(p, a, b):
    """Distance from points p (..., 2) to segments a-b (broadcastable)."""
    p, a, b = np.asarray(p, float), np.asarray(a, float), np.asarray(b, float)
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.sum((p - a) * ab, axis=-1) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1)


def inside_polygon(vertices: np.ndarray, p) -> np.ndarray:
    """Even-odd test, vectorized over points (..., 2)."""
    p = np.asarray(p, float)
    x, y = p[..., 0][..., None], p[..., 1][..., None]
    a = vertices
    b = np.roll(vertices, -1, axis=0)
    cond = (a[:, 1] > y) != (b[:, 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = a[:, 0] + (y - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
    hits = cond & (x < xc)
    return np.count_nonzero(hits, axis=-1) % 2 == 1


def boundary_distance_and_gradient(env: Environment, pts: np.ndarray):
    """Signed boundary distance of pts (P, 2) and its gradient (P, 2)."""
    pts = np.asarray(pts, float).reshape(-1, 2)
    a, b = env.edges
    ab = b - a  # (E, 2)
    ap = pts[:, None, :] - a[None]  # (P, E, 2)
    denom = np.sum(ab * ab, axis=-1)
    t = np.clip(np.sum(ap * ab[None], axis=-1) / denom[None], 0.0, 1.0)
    diff = ap - t[..., None] * ab[None]
    dist = np.linalg.norm(diff, axis=-1)
    j = np.argmin(dist, axis=1)
    rows = np.arange(len(pts))
    d = dist[rows, j]
    vec = diff[rows, j]
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = np.where(d[:, None] > 0, vec / d[:, None], 0.0)
    sign = np.where(inside_polygon(env.vertices, pts), 1.0, -1.0)
    grad = sign[:, None] * grad
    on = d == 0
    if on.any():
        # on the boundary the nearest-point direction vanishes; use the
        # normal of the nearest edge, oriented into the free space
        e = ab[j[on]]
        nrm = np.stack([-e[:, 1], e[:, 0]], axis=1) / np.sqrt(denom[j[on]])[:, None]
        probe = pts[on] + 1e-7 * nrm
        flip = np.where(inside_polygon(env.vertices, probe), 1.0, -1.0)
        grad[on] = nrm * flip[:, None]
    return sign * d, grad


def distance_to_boundary(env: Environment, x) -> float | np.ndarray:
    """Signed distance to the boundary; negative outside the free space."""
    x = np.asarray(x, float)
    d, _ = boundary_distance_and_gradient(env, x.reshape(-1, 2))
    if x.ndim == 1:
        return float(d[0])
    return d.reshape(x.shape[:-1])


def segment_segment_distance(p0, p1, q0, q1) -> np.ndarray:
    """Minimum distance between segments p0-p1 and q0-q1 (broadcastable)."""
    p0, p1, q0, q1 = (np.asarray(v, float) for v in (p0, p1, q0, q1))
    d = np.minimum.reduce([
        point_segment_distance(p0, q0, q1),
        point_segment_distance(p1, q0, q1),
        point_segment_distance(q0, p0, p1),
        point_segment_distance(q1, p0, p1),
    ])
    return np.where(segments_cross(p0, p1, q0, q1), 0.0, d)


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
        c[..., 0] - a[..., 0]
    )


def segments_cross(p0, p1, q0, q1) -> np.ndarray:
    """Proper crossing test (endpoints touching do not count)."""
    o1, o2 = _orient(p0, p1, q0), _orient(p0, p1, q1)
    o3, o4 = _orient(q0, q1, p0), _orient(q0, q1, p1)
    return (o1 * o2 < 0) & (o3 * o4 < 0)


def segment_clearance(env: Environment, p0, p1) -> np.ndarray:
    """Minimum signed boundary distance over segments p0-p1 (S, 2) each."""
    p0 = np.asarray(p0, float).reshape(-1, 2)
    p1 = np.asarray(p1, float).reshape(-1, 2)
    a, b = env.edges
    d = segment_segment_distance(p0[:, None], p1[:, None], a[None], b[None]).min(axis=1)
    end0 = distance_to_boundary(env, p0)
    end1 = distance_to_boundary(env, p1)
    outside = np.minimum(end0, end1)
    # a segment leaving the polygon has zero distance somewhere; report the
    # deeper endpoint violation when there is one
    return np.where(outside < 0, outside, d)


def corner_distance_and_gradient(env: Environment, p0, p1):
    """Signed distance from segments p0-p1 (S, 2) to the nearest reflex corner.

    Returns ``(d, s, e)``: the distance, the segment parameter of the closest
    point and the unit direction from the corner to that point.  ``d`` is
    negative when the closest point lies outside the free space, i.e. the
    segment cuts the corner.  The derivative of ``d`` with respect to p0 is
    ``(1 - s) * e`` and with respect to p1 ``s * e``.  Without reflex corners
    ``d`` is +inf.
    """
    p0 = np.asarray(p0, float).reshape(-1, 2)
    p1 = np.asarray(p1, float).reshape(-1, 2)
    S = len(p0)
    corners, free_dir = _reflex_corners(env)
    if not len(corners):
        return np.full(S, np.inf), np.zeros(S), np.zeros((S, 2))
    ab = p1 - p0
    denom = np.sum(ab * ab, axis=-1)
    va = corners[None] - p0[:, None]  # (S, R, 2)
    t = np.sum(va * ab[:, None], axis=-1) / np.where(denom > 0, denom, 1.0)[:, None]
    t = np.clip(t, 0.0, 1.0)
    close = p0[:, None] + t[..., None] * ab[:, None]
    diff = close - corners[None]
    dist = np.linalg.norm(diff, axis=-1)
    j = np.argmin(dist, axis=1)
    rows = np.arange(S)
    d, s, vec = dist[rows, j], t[rows, j], diff[rows, j]
    with np.errstate(invalid="ignore", divide="ignore"):
        e = np.where(d[:, None] > 0, vec / d[:, None], free_dir[j])
    sign = np.where(inside_polygon(env.vertices, close[rows, j]) | (d == 0), 1.0, -1.0)
    return sign * d, s, sign[:, None] * e


def _reflex_corners(env: Environment):
    """Reflex vertices and, for each, the unit bisector pointing into free space."""
    pts = np.array(_reflex_vertices(env), float).reshape(-1, 2)
    v = env.vertices
    dirs = []
    for c in pts:
        i = int(np.argmin(np.linalg.norm(v - c, axis=1)))
        e1 = v[i - 1] - v[i]
        e2 = v[(i + 1) % len(v)] - v[i]
        w = -(e1 / np.linalg.norm(e1) + e2 / np.linalg.norm(e2))
        dirs.append(w / np.linalg.norm(w))
    return pts, np.array(dirs).reshape(-1, 2)


# --------------------------------------------------------------------------
# shortest paths


def _visible(env: Environment, p, q) -> bool:
    if p == q:
        return True
    return env.shape.covers(LineString([p, q]))


def _reflex_vertices(env: Environment) -> list[tuple[float, float]]:
    v = env.vertices
    ccw = env.shape.exterior.is_ccw
    out = []
    n = len(v)
    for i in range(n):
        cross = _orient(v[i - 1], v[i], v[(i + 1) % n])
        if (cross < 0) if ccw else (cross > 0):
            out.append((float(v[i][0]), float(v[i][1])))
    return out


def shortest_path(env: Environment, n: int) -> ReferencePath:
    """Euclidean shortest path inside the polygon via its visibility graph."""
    if not 0 <= n < env.N:
        raise IndexError(n)
    s, g = env.endpoints[n]
    for p in (s, g):
        if not env.shape.covers(Point(p)):
            raise Unreachable(f"{p} lies outside the free space")
    nodes = [s, *_reflex_vertices(env), g]
    goal = len(nodes) - 1
    # Dijkstra on (length, vertex sequence) for lexicographic tie-breaking
    heap = [(0.0, (0,))]
    done = set()
    while heap:
        cost, seq = heapq.heappop(heap)
        u = seq[-1]
        if u in done:
            continue
        done.add(u)
        if u == goal:
            return ReferencePath(np.array([nodes[i] for i in seq], dtype=float))
        for v in range(len(nodes)):
            if v in done or not _visible(env, nodes[u], nodes[v]):
                continue
            step = math.dist(nodes[u], nodes[v])
            heapq.heappush(heap, (round(cost + step, 12), seq + (v,)))
    raise Unreachable(f"no path from {s} to {g}")


def path_intersections(paths: list[ReferencePath], eps: float = 1e-9):
    """Transversal crossings between distinct paths.

    Returns tuples ``(n, n2, point, arc_n, arc_n2)`` with n < n2, sorted by
    (n, arc_n).
    """
    out = []
    for n in range(len(paths)):
        for n2 in range(n + 1, len(paths)):
            found = []
            P, Q = paths[n].vertices, paths[n2].vertices
            cp, cq = paths[n].cumulative, paths[n2].cumulative
            for i in range(len(P) - 1):
                for j in range(len(Q) - 1):
                    hit = _segment_intersection(P[i], P[i + 1], Q[j], Q[j + 1], eps)
                    if hit is None:
                        continue
                    u, v = hit
                    sp = cp[i] + u * (cp[i + 1] - cp[i])
                    sq = cq[j] + v * (cq[j + 1] - cq[j])
                    if any(abs(sp - f[3]) < 1e-7 for f in found):
                        continue
                    point = P[i] + u * (P[i + 1] - P[i])
                    found.append((n, n2, point, float(sp), float(sq)))
            out.extend(found)
    out.sort(key=lambda f: (f[0], f[3]))
    return out


def _segment_intersection(p0, p1, q0, q1, eps):
    r = p1 - p0
    s = q1 - q0
    denom = r[0] * s[1] - r[1] * s[0]
    qp = q0 - p0
    if abs(denom) < eps * max(1.0, np.linalg.norm(r) * np.linalg.norm(s)):
        # parallel: reject positive-length collinear overlap
        if abs(qp[0] * r[1] - qp[1] * r[0]) < eps:
            rr = float(r @ r)
            t0 = float(qp @ r) / rr
            t1 = float((q1 - p0) @ r) / rr
            lo, hi = max(min(t0, t1), 0.0), min(max(t0, t1), 1.0)
            if hi - lo > eps:
                raise DegenerateOverlap("paths share a collinear stretch")
        return None
    u = (qp[0] * s[1] - qp[1] * s[0]) / denom
    v = (qp[0] * r[1] - qp[1] * r[0]) / denom
    if -eps <= u <= 1 + eps and -eps <= v <= 1 + eps:
        return float(np.clip(u, 0, 1)), float(np.clip(v, 0, 1))
    return None
