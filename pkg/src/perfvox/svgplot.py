"""Deterministic static SVG line charts (per-sex series with error bars)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from .errors import ParseError

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 120, 40, 60
COLORS = {"F": "#c0392b", "M": "#2471a3"}
FALLBACK = ("#117a65", "#7d3c98", "#b9770e")


@dataclass
class Series:
    name: str
    ys: list  # Optional[float] per x position
    errs: Optional[list] = None


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def render_line_chart(x_labels: Sequence[str], series: Sequence[Series], title: str = "",
                      y_label: str = "", x_label: str = "") -> str:
    if not x_labels or not series:
        raise ParseError("nothing to plot")
    vals = []
    for s in series:
        for i, y in enumerate(s.ys):
            if y is None:
                continue
            e = (s.errs[i] or 0.0) if s.errs else 0.0
            vals += [y - e, y + e]
    if not vals:
        raise ParseError("no finite values to plot")
    ticks = nice_ticks(min(vals), max(vals))
    ymin, ymax = ticks[0], ticks[-1]
    if ymax == ymin:
        ymax = ymin + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    nx = len(x_labels)

    def px(i):
        return LEFT + (pw * (i + 0.5) / nx)

    def py(v):
        return TOP + ph * (1.0 - (v - ymin) / (ymax - ymin))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>')
    out.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>')
    for t in ticks:
        y = py(t)
        out.append(f'<line x1="{LEFT - 4}" y1="{_fmt(y)}" x2="{LEFT}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 7}" y="{_fmt(y + 4)}" text-anchor="end">{t:g}</text>')
    step = max(1, nx // 12)
    for i, lab in enumerate(x_labels):
        if i % step:
            continue
        out.append(f'<text x="{_fmt(px(i))}" y="{TOP + ph + 16}" text-anchor="middle">{escape(str(lab))}</text>')
    if x_label:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(x_label)}</text>')
    if y_label:
        out.append(f'<text x="18" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {TOP + ph / 2:.2f})">{escape(y_label)}</text>')
    for si, s in enumerate(series):
        color = COLORS.get(s.name, FALLBACK[si % len(FALLBACK)])
        pts = [(px(i), py(y)) for i, y in enumerate(s.ys) if y is not None]
        out.append(f'<g class="series" data-name="{escape(s.name)}">')
        if len(pts) > 1:
            path = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for i, y in enumerate(s.ys):
            if y is None:
                continue
            x = px(i)
            e = s.errs[i] if s.errs else None
            if e:
                y0, y1 = py(y - e), py(y + e)
                out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(y0)}" x2="{_fmt(x)}" y2="{_fmt(y1)}" stroke="{color}"/>')
                for yy in (y0, y1):
                    out.append(f'<line x1="{_fmt(x - 4)}" y1="{_fmt(yy)}" x2="{_fmt(x + 4)}" y2="{_fmt(yy)}" '
                               f'stroke="{color}"/>')
            out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>')
        out.append("</g>")
        ly = TOP + 10 + 18 * si
        out.append(f'<line x1="{WIDTH - RIGHT + 15}" y1="{ly}" x2="{WIDTH - RIGHT + 35}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - RIGHT + 40}" y="{ly + 4}">{escape(s.name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _rows(text: str) -> list:
    rows = [r for r in csv.reader(text.splitlines()) if r]
    if len(rows) < 2:
        raise ParseError("plot input has no data rows")
    return rows


def _float(v: str) -> Optional[float]:
    if v == "":
        return None
    try:
        x = float(v)
    except ValueError:
        raise ParseError(f"not a number: {v!r}") from None
    return x if math.isfinite(x) else None


def trend_series(text: str) -> tuple:
    """Parse an age-trend CSV (``lo,hi,sex,mean,std,n``) into x labels and
    per-sex series."""
    rows = _rows(text)
    if rows[0][:5] != ["lo", "hi", "sex", "mean", "std"]:
        raise ParseError("not an age-trend file")
    bins, data = [], {}
    for r in rows[1:]:
        if len(r) < 5:
            raise ParseError(f"short trend row {r}")
        key = f"{r[0]}-{r[1]}"
        if key not in bins:
            bins.append(key)
        data[(key, r[2])] = (_float(r[3]), _float(r[4]))
    series = []
    for sex in sorted({s for _, s in data}):
        ys = [data.get((b, sex), (None, None))[0] for b in bins]
        es = [data.get((b, sex), (None, None))[1] for b in bins]
        series.append(Series(sex, ys, es))
    return bins, series


def stats_series(text: str) -> tuple:
    """Parse a cluster stats report into per-sex cluster-mean series."""
    rows = _rows(text)
    head = rows[0]
    if head[:1] != ["cluster_id"] or "mean_F" not in head or "mean_M" not in head:
        raise ParseError("not a stats report")
    i_f, i_m = head.index("mean_F"), head.index("mean_M")
    xs = [r[0] for r in rows[1:]]
    return xs, [Series("F", [_float(r[i_f]) for r in rows[1:]]), Series("M", [_float(r[i_m]) for r in rows[1:]])]


def plot_file_text(text: str) -> str:
    if not text.strip():
        raise ParseError("plot input is empty")
    head = text.splitlines()[0]
    if head.startswith("lo,hi,sex"):
        xs, series = trend_series(text)
        return render_line_chart(xs, series, "Mean CBF by age bin and sex", "mean CBF (+-1 SD)", "age bin (years)")
    if head.startswith("cluster_id"):
        xs, series = stats_series(text)
        return render_line_chart(xs, series, "Cluster mean CBF by sex", "mean CBF", "cluster")
    raise ParseError("plot input must be an age-trend CSV or a stats report")
