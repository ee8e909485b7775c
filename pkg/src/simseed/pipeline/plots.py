"""Heatmaps, demographic bar charts and WRSI time series as SVG or PNG.

Figures are assembled from a handful of primitives on a ``Canvas`` and then
rendered either as SVG text or, through Pillow, as a PNG bitmap. Coordinates
are printed with two decimals so SVG output is byte-stable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

# Viridis sampled at 9 evenly spaced stops; interpolated linearly in RGB.
VIRIDIS = (
    (68, 1, 84),
    (71, 45, 123),
    (59, 82, 139),
    (44, 114, 142),
    (33, 145, 140),
    (40, 174, 128),
    (94, 201, 98),
    (173, 220, 48),
    (253, 231, 37),
)
GREYS = ((250, 250, 250), (20, 20, 20))
RAMPS = {"viridis": VIRIDIS, "greys": GREYS}

SERIES_COLORS = ((31, 119, 180), (214, 39, 40), (44, 160, 44), (255, 127, 14),
                 (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127))
GENDER_COLORS = {"female": (214, 39, 40), "male": (31, 119, 180)}
INK = (34, 34, 34)
GRID = (221, 221, 221)

MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 100, 40, 50


class PlotError(ValueError):
    pass


@dataclass(frozen=True)
class PlotSpec:
    title: str
    path: Path
    width: int = 640
    height: int = 480
    ramp: str = "viridis"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise PlotError("plot dimensions must be positive")
        if self.ramp not in RAMPS:
            raise PlotError(f"unknown color ramp {self.ramp!r}; choose from {sorted(RAMPS)}")
        if Path(self.path).suffix.lower() not in (".svg", ".png"):
            raise PlotError(f"plot path must end in .svg or .png: {self.path}")


def ramp_color(t: float, ramp: str = "viridis") -> tuple[int, int, int]:
    stops = RAMPS[ramp]
    t = min(max(t, 0.0), 1.0)
    x = t * (len(stops) - 1)
    i = min(int(x), len(stops) - 2)
    f = x - i
    a, b = stops[i], stops[i + 1]
    return tuple(int(round(a[k] + (b[k] - a[k]) * f)) for k in range(3))


def _hex(c) -> str:
    return "#%02x%02x%02x" % c


def _n(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def _label(v: float) -> str:
    return f"{v:.6g}"


class Canvas:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.items: list[tuple] = []

    def rect(self, x, y, w, h, fill, stroke=None):
        self.items.append(("rect", x, y, w, h, fill, stroke))

    def line(self, points, stroke, width=1.0):
        self.items.append(("line", tuple(points), stroke, width))

    def circle(self, x, y, r, fill):
        self.items.append(("circle", x, y, r, fill))

    def text(self, x, y, s, size=12, anchor="start", rotate=False):
        self.items.append(("text", x, y, str(s), size, anchor, rotate))

    def to_svg(self) -> str:
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
               f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">',
               '<rect x="0" y="0" width="100%" height="100%" fill="#ffffff"/>']
        for it in self.items:
            kind = it[0]
            if kind == "rect":
                _, x, y, w, h, fill, stroke = it
                fill_s = "none" if fill is None else _hex(fill)
                extra = "" if stroke is None else f' stroke="{_hex(stroke)}"'
                out.append(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(h)}" '
                           f'fill="{fill_s}"{extra}/>')
            elif kind == "line":
                _, pts, stroke, width = it
                p = " ".join(f"{_n(a)},{_n(b)}" for a, b in pts)
                out.append(f'<polyline points="{p}" fill="none" stroke="{_hex(stroke)}" '
                           f'stroke-width="{_n(width)}"/>')
            elif kind == "circle":
                _, x, y, r, fill = it
                out.append(f'<circle cx="{_n(x)}" cy="{_n(y)}" r="{_n(r)}" fill="{_hex(fill)}"/>')
            else:
                _, x, y, s, size, anchor, rotate = it
                rot = f' transform="rotate(-90 {_n(x)} {_n(y)})"' if rotate else ""
                out.append(f'<text x="{_n(x)}" y="{_n(y)}" font-family="sans-serif" '
                           f'font-size="{size}" text-anchor="{anchor}" '
                           f'fill="{_hex(INK)}"{rot}>{escape(s)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def to_png(self, path) -> None:
        from PIL import Image, ImageDraw, ImageFont

        img = Image.new("RGB", (self.width, self.height), (255, 255, 255))
        d = ImageDraw.Draw(img)
        font = ImageFont.load_default()
        for it in self.items:
            kind = it[0]
            if kind == "rect":
                _, x, y, w, h, fill, stroke = it
                d.rectangle([x, y, x + max(w, 1) - 1, y + max(h, 1) - 1], fill=fill,
                            outline=stroke)
            elif kind == "line":
                _, pts, stroke, width = it
                d.line([tuple(p) for p in pts], fill=stroke, width=max(1, round(width)))
            elif kind == "circle":
                _, x, y, r, fill = it
                d.ellipse([x - r, y - r, x + r, y + r], fill=fill)
            else:
                _, x, y, s, size, anchor, _ = it
                w = d.textlength(s, font=font)
                dx = {"start": 0, "middle": -w / 2, "end": -w}[anchor]
                d.text((x + dx, y - 10), s, fill=INK, font=font)
        img.save(path, format="PNG", optimize=False)

    def save(self, path) -> Path:
        path = Path(path)
        if path.suffix.lower() == ".png":
            self.to_png(path)
        else:
            path.write_text(self.to_svg(), encoding="utf-8", newline="\n")
        return path


def _frame(spec: PlotSpec) -> tuple[Canvas, float, float, float, float]:
    c = Canvas(spec.width, spec.height)
    c.text(spec.width / 2, 24, spec.title, size=16, anchor="middle")
    x0, y0 = MARGIN_L, MARGIN_T
    w = max(spec.width - MARGIN_L - MARGIN_R, 1)
    h = max(spec.height - MARGIN_T - MARGIN_B, 1)
    return c, x0, y0, w, h


def _legend_ramp(c: Canvas, x, y, h, lo, hi, ramp, steps=32):
    step = h / steps
    for k in range(steps):
        t = 1 - (k + 0.5) / steps
        c.rect(x, y + k * step, 16, step, ramp_color(t, ramp))
    c.rect(x, y, 16, h, None, INK)
    c.text(x + 22, y + 10, _label(hi), size=11)
    c.text(x + 22, y + h, _label(lo), size=11)


def infer_cellsize(rows: Sequence[tuple[float, float, float]]) -> float:
    best = math.inf
    for axis in (0, 1):
        vals = sorted({r[axis] for r in rows})
        for a, b in zip(vals, vals[1:]):
            if b - a > 1e-12:
                best = min(best, b - a)
    return best if math.isfinite(best) else 1.0


def emit_heatmap(rows: Sequence[tuple[float, float, float | None]], spec: PlotSpec,
                 cellsize: float | None = None, value_label: str = "") -> Path:
    """Colored-cell map of (lat, lon, value) rows; None values are left transparent."""
    rows = list(rows)
    if not rows:
        raise PlotError("heatmap needs at least one row")
    cs = cellsize or infer_cellsize(rows)
    vals = [v for _, _, v in rows if v is not None]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 0.0)
    lat_lo = min(r[0] for r in rows) - cs / 2
    lat_hi = max(r[0] for r in rows) + cs / 2
    lon_lo = min(r[1] for r in rows) - cs / 2
    lon_hi = max(r[1] for r in rows) + cs / 2

    c, x0, y0, w, h = _frame(spec)
    sx = w / (lon_hi - lon_lo)
    sy = h / (lat_hi - lat_lo)
    for lat, lon, v in rows:
        if v is None:
            continue
        t = 0.0 if hi == lo else (v - lo) / (hi - lo)
        c.rect(x0 + (lon - cs / 2 - lon_lo) * sx, y0 + (lat_hi - lat - cs / 2) * sy,
               cs * sx, cs * sy, ramp_color(t, spec.ramp))
    c.rect(x0, y0, w, h, None, INK)
    c.text(x0, y0 + h + 16, _label(lon_lo), size=11, anchor="start")
    c.text(x0 + w, y0 + h + 16, _label(lon_hi), size=11, anchor="end")
    c.text(x0 + w / 2, y0 + h + 38, "Longitude", size=12, anchor="middle")
    c.text(x0 - 6, y0 + h, _label(lat_lo), size=11, anchor="end")
    c.text(x0 - 6, y0 + 10, _label(lat_hi), size=11, anchor="end")
    c.text(18, y0 + h / 2, "Latitude", size=12, anchor="middle", rotate=True)
    _legend_ramp(c, x0 + w + 14, y0, h, lo, hi, spec.ramp)
    if value_label:
        c.text(x0 + w + 14, y0 + h + 16, value_label, size=11)
    return c.save(spec.path)


def emit_blank(spec: PlotSpec, message: str) -> Path:
    c, x0, y0, w, h = _frame(spec)
    c.rect(x0, y0, w, h, None, INK)
    c.text(x0 + w / 2, y0 + h / 2, message, size=12, anchor="middle")
    return c.save(spec.path)


def _nice_max(v: float) -> float:
    if v <= 0:
        return 1.0
    mag = 10 ** math.floor(math.log10(v))
    for m in (1, 2, 2.5, 5, 10):
        if m * mag >= v:
            return m * mag
    return 10 * mag


def _y_axis(c: Canvas, x0, y0, w, h, top, ticks=5, label=""):
    for k in range(ticks + 1):
        v = top * k / ticks
        y = y0 + h - h * k / ticks
        c.line([(x0, y), (x0 + w, y)], GRID)
        c.text(x0 - 6, y + 4, _label(v), size=11, anchor="end")
    if label:
        c.text(18, y0 + h / 2, label, size=12, anchor="middle", rotate=True)


def emit_pyramid(table: Sequence[tuple[str, str, int]], spec: PlotSpec) -> Path:
    """Grouped vertical bars: one group per age bracket, one bar per gender."""
    table = list(table)
    if not table:
        raise PlotError("pyramid chart needs at least one row")
    brackets = list(dict.fromkeys(b for _, b, _ in table))
    genders = list(dict.fromkeys(g for g, _, _ in table))
    totals = {(g, b): n for g, b, n in table}
    top = _nice_max(max(n for *_, n in table))

    c, x0, y0, w, h = _frame(spec)
    _y_axis(c, x0, y0, w, h, top, label="People")
    slot = w / len(brackets)
    bar = slot * 0.8 / len(genders)
    for bi, b in enumerate(brackets):
        left = x0 + bi * slot + slot * 0.1
        for gi, g in enumerate(genders):
            n = totals.get((g, b), 0)
            bh = h * n / top
            color = GENDER_COLORS.get(g, SERIES_COLORS[gi % len(SERIES_COLORS)])
            c.rect(left + gi * bar, y0 + h - bh, bar, bh, color)
        c.text(x0 + (bi + 0.5) * slot, y0 + h + 16, b, size=11, anchor="middle")
    c.line([(x0, y0 + h), (x0 + w, y0 + h)], INK)
    c.text(x0 + w / 2, y0 + h + 38, "Age bracket", size=12, anchor="middle")
    for gi, g in enumerate(genders):
        color = GENDER_COLORS.get(g, SERIES_COLORS[gi % len(SERIES_COLORS)])
        ly = y0 + 10 + gi * 18
        c.rect(x0 + w + 12, ly - 9, 12, 12, color)
        c.text(x0 + w + 30, ly + 1, g, size=11)
    return c.save(spec.path)


def emit_timeseries(series: dict[str, Sequence[float | None]], months: Sequence[str],
                    spec: PlotSpec, y_label: str = "WRSI") -> Path:
    """One polyline per named series over ``months``; None values break the line."""
    if not series or not months:
        raise PlotError("time series needs at least one series and one month")
    for name, vals in series.items():
        if len(vals) != len(months):
            raise PlotError(f"series {name!r} has {len(vals)} values for {len(months)} months")
    finite = [v for vals in series.values() for v in vals if v is not None]
    top = _nice_max(max(finite + [100.0]) * 1.05)

    c, x0, y0, w, h = _frame(spec)
    _y_axis(c, x0, y0, w, h, top, label=y_label)
    step = w / len(months)

    def px(i):
        return x0 + (i + 0.5) * step

    def py(v):
        return y0 + h - h * v / top

    for i, m in enumerate(months):
        c.text(px(i), y0 + h + 16, m, size=11, anchor="middle")
    c.line([(x0, y0 + h), (x0 + w, y0 + h)], INK)
    c.text(x0 + w / 2, y0 + h + 38, "Month", size=12, anchor="middle")
    for si, (name, vals) in enumerate(series.items()):
        color = SERIES_COLORS[si % len(SERIES_COLORS)]
        run: list[tuple[float, float]] = []
        for i, v in enumerate(list(vals) + [None]):
            if v is None:
                if len(run) > 1:
                    c.line(run, color, 2)
                run = []
                continue
            run.append((px(i), py(v)))
            c.circle(px(i), py(v), 3, color)
        ly = y0 + 10 + si * 18
        c.line([(x0 + w + 10, ly - 3), (x0 + w + 26, ly - 3)], color, 2)
        c.text(x0 + w + 30, ly + 1, name, size=11)
    return c.save(spec.path)
