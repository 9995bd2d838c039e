"""Render a completed run directory into CSV tables and SVG figures.

Nothing is recomputed here: every value is read from the aggregate CSVs the
runner wrote next to ``results.csv``.
"""

from __future__ import annotations

import re
from html import escape
from pathlib import Path

from .runner import SOURCE, read_csv, write_csv

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
UPPER_BOUND_COLUMNS = ["paradigm", "strategy", "flags", "most_recent_mean", "most_recent_std",
                       "upper_bound_mean", "upper_bound_std", "p_vs_source"]
BUFFER_COLUMNS = ["paradigm", "flags", "sessions_used", "strategy", "mean", "std"]
OTTA_COLUMNS = ["paradigm", "ea", "adabn", "mean", "std", "n_subjects"]
REQUIRED = ("results.csv", "summary.csv", "session_curves.csv", "eval_matrix.csv", "distances.csv")


class ReportError(RuntimeError):
    pass


class Svg:
    def __init__(self, width: int, height: int):
        self.w, self.h = width, height
        self.items: list[str] = []

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
                          f'stroke="{stroke}" stroke-width="{width}"{d}/>')

    def rect(self, x, y, w, h, fill, stroke="none"):
        self.items.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" height="{h:.1f}" '
                          f'fill="{fill}" stroke="{stroke}"/>')

    def text(self, x, y, s, size=11, anchor="middle", cls=None):
        c = f' class="{cls}"' if cls else ""
        self.items.append(f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" text-anchor="{anchor}" '
                          f'font-family="sans-serif"{c}>{escape(str(s))}</text>')

    def polyline(self, pts, stroke, cls=None):
        c = f' class="{cls}"' if cls else ""
        p = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        self.items.append(f'<polyline points="{p}" fill="none" stroke="{stroke}" stroke-width="2"{c}/>')

    def circle(self, x, y, r, fill):
        self.items.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r}" fill="{fill}"/>')

    def render(self) -> str:
        body = "\n".join(self.items)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">\n<rect width="100%" height="100%" fill="white"/>\n'
                f"{body}\n</svg>\n")


def _axes(svg: Svg, x0, y0, x1, y1, lo, hi, label):
    svg.line(x0, y1, x1, y1)
    svg.line(x0, y0, x0, y1)
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = y1 - (y1 - y0) * k / 4
        svg.line(x0 - 4, y, x0, y)
        svg.text(x0 - 6, y + 4, f"{v:.0f}", 10, "end")
    svg.text(14, (y0 + y1) / 2, label, 11, "middle")


def _range(values, pad=5.0):
    lo = min(values) - pad
    hi = max(values) + pad
    return max(0.0, 5 * (lo // 5)), min(100.0, 5 * -(-hi // 5))


def session_curve_svg(curves: list[dict], flags: str) -> str:
    # fine-tuning strategies only; the source model is shown in the bar chart
    rows = [r for r in curves if r["flags"] == flags and r["strategy"] != SOURCE]
    strategies = sorted({r["strategy"] for r in rows})
    sessions = sorted({int(r["eval_session"]) for r in rows})
    svg = Svg(640, 360)
    if not rows:
        svg.text(320, 180, "no data")
        return svg.render()
    lo, hi = _range([float(r["mean"]) for r in rows])
    x0, y0, x1, y1 = 60, 30, 500, 320
    _axes(svg, x0, y0, x1, y1, lo, hi, "acc %")
    span = max(1, len(sessions) - 1)
    xs = {s: x0 + 20 + (x1 - x0 - 40) * i / span for i, s in enumerate(sessions)}
    for s in sessions:
        svg.text(xs[s], y1 + 16, s, 10)
    svg.text((x0 + x1) / 2, y1 + 32 if y1 + 32 < 360 else 356, "evaluation session", 11)
    for k, strat in enumerate(strategies):
        color = PALETTE[k % len(PALETTE)]
        pts = [(xs[int(r["eval_session"])], y1 - (y1 - y0) * (float(r["mean"]) - lo) / (hi - lo))
               for r in rows if r["strategy"] == strat]
        svg.polyline(pts, color, cls="curve")
        for x, y in pts:
            svg.circle(x, y, 3, color)
        svg.rect(515, 40 + 18 * k, 12, 12, color)
        svg.text(532, 50 + 18 * k, strat, 11, "start")
    return svg.render()


def bar_svg(summary: list[dict], flags: str) -> str:
    rows = [r for r in summary if r["flags"] == flags]
    svg = Svg(120 + 70 * max(1, len(rows)), 340)
    if not rows:
        svg.text(svg.w / 2, 170, "no data")
        return svg.render()
    means = [float(r["mean"]) for r in rows]
    stds = [float(r["std"] or 0) for r in rows]
    lo, hi = _range([m - s for m, s in zip(means, stds)] + [m + s for m, s in zip(means, stds)])
    x0, y0, x1, y1 = 60, 30, svg.w - 20, 280
    _axes(svg, x0, y0, x1, y1, lo, hi, "acc %")
    scale = (y1 - y0) / (hi - lo)
    for k, (r, m, s) in enumerate(zip(rows, means, stds)):
        x = x0 + 15 + 70 * k
        top = y1 - (m - lo) * scale
        svg.rect(x, top, 40, y1 - top, PALETTE[k % len(PALETTE)])
        svg.line(x + 20, y1 - (m + s - lo) * scale, x + 20, y1 - (max(lo, m - s) - lo) * scale, width=1.5)
        svg.text(x + 20, top - 4, f"{m:.1f}", 10)
        svg.text(x + 20, y1 + 16, r["strategy"], 10)
    return svg.render()


def _heat(v: float, lo: float, hi: float) -> str:
    t = 0.0 if hi <= lo else min(1.0, max(0.0, (v - lo) / (hi - lo)))
    r = int(255 - 200 * t)
    g = int(255 - 120 * t)
    b = int(255 - 30 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def matrix_svg(cells: list[dict], title: str, row_key: str, col_key: str, value_key: str,
               fmt: str = "{:.1f}") -> str:
    """Heatmap; cells whose value is ``X`` are drawn with the mask glyph."""
    rows = sorted({int(c[row_key]) for c in cells})
    cols = []
    for c in cells:
        if c[col_key] not in cols:
            cols.append(c[col_key])
    cols.sort(key=lambda c: (c != SOURCE, int(c) if c != SOURCE else 0))
    size = 44
    svg = Svg(90 + size * len(cols), 70 + size * len(rows))
    svg.text(svg.w / 2, 18, title, 12)
    vals = [float(c[value_key]) for c in cells if c[value_key] != "X"]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    lookup = {(int(c[row_key]), c[col_key]): c[value_key] for c in cells}
    for j, col in enumerate(cols):
        svg.text(80 + size * j + size / 2, 40, col, 10)
    for i, r in enumerate(rows):
        y = 48 + size * i
        svg.text(70, y + size / 2 + 4, r, 10, "end")
        for j, col in enumerate(cols):
            x = 80 + size * j
            v = lookup.get((r, col), "X")
            if v == "X":
                svg.rect(x, y, size, size, "#f0f0f0", "#ccc")
                svg.text(x + size / 2, y + size / 2 + 5, "X", 14, cls="mask")
            else:
                svg.rect(x, y, size, size, _heat(float(v), lo, hi), "#ccc")
                svg.text(x + size / 2, y + size / 2 + 4, fmt.format(float(v)), 10, cls="value")
    return svg.render()


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def _buffer_size(strategy: str) -> int | None:
    if strategy == "ef-seq":
        return 1
    m = re.fullmatch(r"last(\d+)-seq", strategy)
    return int(m.group(1)) if m else None


def make_report(run_dir, out_dir=None) -> list[Path]:
    """Write figures and tables for ``run_dir``; returns the written paths."""
    run_dir = Path(run_dir)
    missing = [f for f in REQUIRED if not (run_dir / f).exists()]
    if missing:
        raise ReportError(f"{run_dir}: missing {', '.join(missing)}")
    out = Path(out_dir) if out_dir else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    summary = read_csv(run_dir / "summary.csv")
    curves = read_csv(run_dir / "session_curves.csv")
    matrix = read_csv(run_dir / "eval_matrix.csv")
    distances = read_csv(run_dir / "distances.csv")
    if not summary:
        raise ReportError(f"{run_dir}: results are empty")
    written = []

    def save(name: str, text: str):
        p = out / name
        p.write_text(text)
        written.append(p)

    for flags in sorted({r["flags"] for r in summary}):
        save(f"session_curves_{_slug(flags)}.svg", session_curve_svg(curves, flags))
        save(f"strategy_bars_{_slug(flags)}.svg", bar_svg(summary, flags))
    for key in sorted({(r["strategy"], r["flags"]) for r in matrix}):
        cells = [r for r in matrix if (r["strategy"], r["flags"]) == key]
        save(f"eval_matrix_{_slug(key[0])}_{_slug(key[1])}.svg",
             matrix_svg(cells, f"{key[0]} ({key[1]})", "eval_session", "checkpoint", "accuracy"))
    for key in sorted({(r["strategy"], r["flags"]) for r in distances}):
        cells = [r for r in distances if (r["strategy"], r["flags"]) == key]
        save(f"distance_matrix_{_slug(key[0])}_{_slug(key[1])}.svg",
             matrix_svg(cells, f"cosine distance {key[0]} ({key[1]})", "step_i", "step_j", "distance", "{:.2f}"))

    ub_rows = [{"paradigm": r["paradigm"], "strategy": r["strategy"], "flags": r["flags"],
                "most_recent_mean": r["mean"], "most_recent_std": r["std"],
                "upper_bound_mean": r["upper_bound_mean"], "upper_bound_std": r["upper_bound_std"],
                "p_vs_source": r["p_vs_source"]}
               for r in summary if not r["strategy"].startswith("last")]
    write_csv(out / "table_upper_bound.csv", UPPER_BOUND_COLUMNS, ub_rows)
    written.append(out / "table_upper_bound.csv")

    buf_rows = []
    for r in summary:
        k = _buffer_size(r["strategy"])
        if k is not None or r["strategy"] == "joint-seq":
            buf_rows.append({"paradigm": r["paradigm"], "flags": r["flags"],
                             "sessions_used": "all" if k is None else k, "strategy": r["strategy"],
                             "mean": r["mean"], "std": r["std"]})
    buf_rows.sort(key=lambda r: (r["paradigm"], r["flags"], r["sessions_used"] == "all",
                                 0 if r["sessions_used"] == "all" else int(r["sessions_used"])))
    write_csv(out / "table_buffer.csv", BUFFER_COLUMNS, buf_rows)
    written.append(out / "table_buffer.csv")

    otta_rows = []
    for r in summary:
        if r["strategy"] != SOURCE:
            continue
        parts = set(r["flags"].split("+"))
        otta_rows.append({"paradigm": r["paradigm"], "ea": int("ea" in parts), "adabn": int("adabn" in parts),
                          "mean": r["mean"], "std": r["std"], "n_subjects": r["n_subjects"]})
    otta_rows.sort(key=lambda r: (r["paradigm"], -r["ea"], -r["adabn"]))
    write_csv(out / "table_otta.csv", OTTA_COLUMNS, otta_rows)
    written.append(out / "table_otta.csv")
    return written
