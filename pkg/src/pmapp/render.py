"""Static SVG drawing of an environment and the trajectories of a plan."""
from __future__ import annotations

import colorsys

import numpy as np

from .geometry import Environment
from .planmodel import PeriodicPlan, position_at

WIDTH = 640
PAD = 20


def _palette(i: int, count: int) -> str:
    h = (i / max(count, 1)) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.75, 0.85)
    return f"#{round(r * 255):02x}{round(g * 255):02x}{round(b * 255):02x}"


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_svg(env: Environment, plan: PeriodicPlan | None = None, ticks: bool = True) -> str:
    """SVG text with the free-space outline, one polyline per (n, m) and a dot
    wherever an agent is after each whole elapsed period."""
    V = env.vertices
    lo, hi = V.min(axis=0), V.max(axis=0)
    scale = (WIDTH - 2 * PAD) / max(float((hi - lo).max()), 1e-9)
    height = round(float(hi[1] - lo[1]) * scale + 2 * PAD)

    def xy(p):
        return _fmt(PAD + (p[0] - lo[0]) * scale), _fmt(height - PAD - (p[1] - lo[1]) * scale)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
        f'viewBox="0 0 {WIDTH} {height}">',
        f"<title>{env.name}</title>",
        '<polygon fill="#f4f4f4" stroke="#333" stroke-width="1.5" points="'
        + " ".join(",".join(xy(p)) for p in V) + '"/>',
    ]
    if plan is not None:
        count = plan.N * plan.M
        for n in range(plan.N):
            for m in range(plan.M):
                color = _palette(n * plan.M + m, count)
                pts = " ".join(",".join(xy(p)) for p in plan.points[n, m])
                out.append(f'<polyline id="traj-{n}-{m}" fill="none" stroke="{color}" '
                           f'stroke-width="2" points="{pts}"/>')
                if not ticks:
                    continue
                traj = plan.trajectory(n, m)
                for t in np.arange(0.0, traj.duration + 1e-12, plan.tau):
                    cx, cy = xy(position_at(traj, min(float(t), traj.duration)))
                    out.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
