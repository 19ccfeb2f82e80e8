"""Log-log convergence plots written as plain SVG."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from .results import ConvergenceTable

W, H = 520, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 30, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
GUIDES = (0.5, 1.0, 2.0)


def _series(table: ConvergenceTable, axis: str):
    groups: dict[tuple, list] = {}
    for r in table.rows:
        x = r.h if axis == "space" else r.tau
        for qty, attr in (("velocity", "err_u_ms"), ("pressure integral", "err_pint_ms")):
            v = getattr(r, attr)
            if v > 0:
                groups.setdefault((qty, r.case), []).append((x, math.sqrt(v)))
    return groups


def convergence_svg(table: ConvergenceTable, axis: str, title: str = "") -> str:
    groups = _series(table, axis)
    pts = [p for s in groups.values() for p in s]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">']
    out.append(f'<rect width="{W}" height="{H}" fill="white"/>')
    if not pts:
        out.append(f'<text x="{W / 2}" y="{H / 2}" text-anchor="middle">no positive errors to plot</text></svg>')
        return "\n".join(out) + "\n"
    lx = [math.log2(p[0]) for p in pts]
    ly = [math.log2(p[1]) for p in pts]
    x0, x1 = math.floor(min(lx)) - 0.5, math.ceil(max(lx)) + 0.5
    y0, y1 = math.floor(min(ly)) - 1, math.ceil(max(ly)) + 1

    def px(v):
        return LEFT + (math.log2(v) - x0) / (x1 - x0) * (W - LEFT - RIGHT)

    def py(v):
        return H - BOTTOM - (math.log2(v) - y0) / (y1 - y0) * (H - TOP - BOTTOM)

    out.append(f'<rect x="{LEFT}" y="{TOP}" width="{W - LEFT - RIGHT}" height="{H - TOP - BOTTOM}" fill="none" stroke="black"/>')
    for k in range(math.ceil(x0), math.floor(x1) + 1):
        x = px(2.0**k)
        out.append(f'<line x1="{x:.2f}" y1="{H - BOTTOM}" x2="{x:.2f}" y2="{H - BOTTOM + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{H - BOTTOM + 20}" font-size="12" text-anchor="middle">2^{k}</text>')
    for k in range(math.ceil(y0), math.floor(y1) + 1, max(1, (y1 - y0) // 8)):
        y = py(2.0**k)
        out.append(f'<line x1="{LEFT - 5}" y1="{y:.2f}" x2="{LEFT}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{y + 4:.2f}" font-size="12" text-anchor="end">2^{k}</text>')
    label = "h" if axis == "space" else "tau"
    out.append(f'<text x="{(W + LEFT - RIGHT) / 2}" y="{H - 15}" font-size="14" text-anchor="middle">{label}</text>')
    out.append(f'<text x="18" y="{(H - BOTTOM + TOP) / 2}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {(H - BOTTOM + TOP) / 2})">RMS error at T</text>')
    if title:
        out.append(f'<text x="{(W + LEFT - RIGHT) / 2}" y="20" font-size="14" text-anchor="middle">{escape(title)}</text>')

    # reference slopes anchored at the coarsest point of the first series
    first = sorted(next(iter(groups.values())), reverse=True)
    ax, ay = first[0]
    xs = [p[0] for p in pts]
    for g in GUIDES:
        xa, xb = max(xs), min(xs)
        ya, yb = ay * 1.6, ay * 1.6 * (xb / xa) ** g
        out.append(
            f'<line x1="{px(xa):.2f}" y1="{py(ya):.2f}" x2="{px(xb):.2f}" y2="{py(max(yb, 2.0**y0)):.2f}" '
            f'stroke="gray" stroke-dasharray="4 3"/>'
        )
        out.append(f'<text x="{px(xb) + 3:.2f}" y="{py(max(yb, 2.0**y0)):.2f}" font-size="11" fill="gray">slope {g:g}</text>')
    for i, ((qty, case), series) in enumerate(sorted(groups.items())):
        color = COLORS[i % len(COLORS)]
        series = sorted(series)
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in series)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in series:
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly_ = TOP + 16 + 16 * i
        out.append(f'<text x="{LEFT + 10}" y="{ly_}" font-size="12" fill="{color}">{escape(qty)} (case {escape(case)})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_convergence_svg(table: ConvergenceTable, path, axis: str, title: str = "") -> None:
    Path(path).write_text(convergence_svg(table, axis, title))
