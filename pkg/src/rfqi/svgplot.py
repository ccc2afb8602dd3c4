"""Line charts of a summary metric against sample size, as standalone SVG."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import UnknownMetric
from .harness import SUMMARY_METRICS, read_summary

WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 80, 170, 30, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
LABELS = {"q_mse": "MSE of q at the first stage", "tpr": "true positive rate", "fpr": "false positive rate",
          "fp_count": "false positive count"}


def _num(x: float) -> str:
    return f"{x:.2f}"


def _tick(v: float) -> str:
    return f"{v:.3g}"


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def render_svg(rows: list[dict], metric: str) -> str:
    """SVG text for ``metric``; ``rows`` are summary rows as returned by ``read_summary``."""
    series: dict[str, list[tuple[int, float, float]]] = {}
    for r in rows:
        if r["metric"] == metric and math.isfinite(r["mean"]):
            series.setdefault(r["method"], []).append((r["n"], r["mean"], r["standard_error"]))
    if not series:
        raise UnknownMetric(f"no rows for metric {metric!r}")
    for pts in series.values():
        pts.sort()

    log_x = metric == "q_mse"
    xs = sorted({p[0] for pts in series.values() for p in pts})
    lo_y = min(max(m - s, 0.0) for pts in series.values() for _, m, s in pts)
    hi_y = max(m + s for pts in series.values() for _, m, s in pts)
    if metric in ("tpr", "fpr"):
        lo_y, hi_y = 0.0, max(1.0, hi_y)
    lo_y = min(lo_y, 0.0)
    if hi_y <= lo_y:
        hi_y = lo_y + 1.0

    fx = (lambda v: math.log10(v)) if log_x else float
    x0, x1 = fx(xs[0]), fx(xs[-1])
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    plot_w, plot_h = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(v):
        return LEFT + (fx(v) - x0) / (x1 - x0) * plot_w

    def py(v):
        return TOP + plot_h - (v - lo_y) / (hi_y - lo_y) * plot_h

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{LEFT}" y1="{TOP + plot_h}" x2="{LEFT + plot_w}" y2="{TOP + plot_h}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + plot_h}" stroke="black"/>',
    ]
    for n in xs:
        x = _num(px(n))
        out.append(f'<line x1="{x}" y1="{TOP + plot_h}" x2="{x}" y2="{TOP + plot_h + 5}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{TOP + plot_h + 20}" font-size="11" text-anchor="middle">{n}</text>')
    for v in _nice_ticks(lo_y, hi_y):
        y = _num(py(v))
        out.append(f'<line x1="{LEFT - 5}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{y}" font-size="11" text-anchor="end" dominant-baseline="middle">{_tick(v)}</text>')
    xlabel = "sample size n (log scale)" if log_x else "sample size n"
    out.append(f'<text x="{LEFT + plot_w / 2:.2f}" y="{HEIGHT - 15}" font-size="13" text-anchor="middle">{xlabel}</text>')
    ylabel = escape(LABELS.get(metric, metric))
    out.append(
        f'<text x="18" y="{TOP + plot_h / 2:.2f}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 18 {TOP + plot_h / 2:.2f})">{ylabel}</text>'
    )

    for i, (method, pts) in enumerate(sorted(series.items())):
        color = COLORS[i % len(COLORS)]
        upper = [(px(n), py(m + s)) for n, m, s in pts]
        lower = [(px(n), py(max(m - s, lo_y))) for n, m, s in reversed(pts)]
        band = " ".join(f"{_num(x)},{_num(y)}" for x, y in upper + lower)
        line = " ".join(f"{_num(px(n))},{_num(py(m))}" for n, m, _ in pts)
        out.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for n, m, _ in pts:
            out.append(f'<circle cx="{_num(px(n))}" cy="{_num(py(m))}" r="3" fill="{color}"/>')
        ly = TOP + 10 + 20 * i
        lx = LEFT + plot_w + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}" font-size="12" dominant-baseline="middle">{escape(method)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(summary_csv: str | Path, metric: str, output_svg: str | Path) -> Path:
    if metric not in SUMMARY_METRICS:
        raise UnknownMetric(f"unknown metric {metric!r}; choose from {list(SUMMARY_METRICS)}")
    out = Path(output_svg)
    out.write_text(render_svg(read_summary(summary_csv), metric))
    return out
