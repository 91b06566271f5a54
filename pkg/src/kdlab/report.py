"""CSV tables and static SVG charts computed from a record directory.

Output is a pure function of the record: no timestamps, fixed float
formatting and a fixed element order, so identical records give identical bytes.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from html import escape
from pathlib import Path

from .errors import ReportError
from .models import parameter_count
from .orchestrator import ExperimentRecord, derive_tables, load_record

KINDS = ("sweep_curve", "train_curve", "eskd_table", "sequential_table")
ESKD_COLUMNS = ("Teacher", "Top-1 Error", "CE (Train)", "KD (Train)", "KD (Test)")
SEQUENTIAL_COLUMNS = ("Model", "# Params", "Seed", "Last Gen.", "All-Gen. Ensemble", "Scratch", "Scratch Ensemble")

WIDTH, HEIGHT = 800, 500
MARGIN = {"left": 70, "right": 170, "top": 40, "bottom": 60}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


# tables --------------------------------------------------------------------

def _require(rec: ExperimentRecord, kinds: tuple[str, ...], report: str) -> None:
    if rec.kind not in kinds:
        raise ReportError(f"{report} needs a record of kind {' or '.join(kinds)}, got {rec.kind!r}")


def sweep_rows(rec: ExperimentRecord) -> list[dict]:
    _require(rec, ("sweep",), "sweep_curve")
    return [
        {
            "teacher": r["teacher"],
            "params": r["params"],
            "student_error_median": r["student_error"]["median"],
            "student_error_std": r["student_error"]["std"],
            "teacher_error_median": r["teacher_error"]["median"],
            "train_kd_error_median": r["train_kd_error"]["median"],
            "test_kd_median": r["test_kd"]["median"],
            "n": r["student_error"]["n"],
        }
        for r in rec.tables["sweep"]
    ]


def curve_legs(rec: ExperimentRecord) -> list[str]:
    """Legs whose final-stage curves are compared; ESKD records show the paired runs only."""
    if rec.kind == "eskd":
        return ["full_kd", "eskd"]
    return rec.legs()


def train_curve_rows(rec: ExperimentRecord) -> list[dict]:
    """Median test error per epoch across seeds, one column per leg (its last stage)."""
    legs = curve_legs(rec)
    series = {}
    for leg in legs:
        logs = [rec.final_stage(leg, s).log for s in rec.spec.seeds]
        series[leg] = [statistics.median(col) for col in zip(*(lg.column("test_top1") for lg in logs))]
    epochs = max(len(v) for v in series.values())
    return [
        {"epoch": e + 1, **{leg: (vals[e] if e < len(vals) else None) for leg, vals in series.items()}}
        for e in range(epochs)
    ]


def eskd_rows(rec: ExperimentRecord) -> list[dict]:
    _require(rec, ("eskd",), "eskd_table")
    return [{c: row[c] for c in ESKD_COLUMNS} for row in rec.tables["eskd_table"]]


def sequential_rows(rec: ExperimentRecord) -> list[dict]:
    _require(rec, ("sequential_kd",), "sequential_table")
    spec = rec.spec.student
    rows = [
        {"Model": spec.label, "# Params": parameter_count(spec), "Seed": c["seed"],
         **{k: c[k] for k in SEQUENTIAL_COLUMNS[3:]}}
        for c in rec.tables["sequential"]
    ]
    med = {k: statistics.median(r[k] for r in rows) for k in SEQUENTIAL_COLUMNS[3:]}
    rows.append({"Model": spec.label, "# Params": parameter_count(spec), "Seed": "median", **med})
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def to_csv(rows: list[dict], columns: tuple[str, ...] | None = None) -> str:
    columns = columns or (tuple(rows[0]) if rows else ())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


# svg -----------------------------------------------------------------------

def nice_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    raw = (hi - lo) / target
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + step * 1e-9:
        ticks.append(round(t, 10))
        t += step
    if ticks[-1] < hi:
        ticks.append(round(ticks[-1] + step, 10))
    return ticks


def _num(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:g}"


class Canvas:
    def __init__(self, title: str):
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
        ]

    def add(self, element: str) -> None:
        self.parts.append(element)

    def text(self, x: float, y: float, s: str, anchor: str = "start", extra: str = "") -> None:
        self.add(f'<text x="{_num(x)}" y="{_num(y)}" text-anchor="{anchor}"{extra}>{escape(s)}</text>')

    def line(self, x1, y1, x2, y2, stroke="black", extra: str = "") -> None:
        self.add(f'<line x1="{_num(x1)}" y1="{_num(y1)}" x2="{_num(x2)}" y2="{_num(y2)}" stroke="{stroke}"{extra}/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class Axes:
    """Linear (or log-x) data-to-pixel mapping over the fixed plot area."""

    def __init__(self, canvas: Canvas, xs, ys, xlabel: str, ylabel: str, logx: bool = False):
        self.c, self.logx = canvas, logx
        tx = [math.log10(x) for x in xs] if logx else list(xs)
        self.xt = nice_ticks(min(tx), max(tx)) if not logx else list(range(math.floor(min(tx)), math.ceil(max(tx)) + 1))
        if logx and len(self.xt) < 2:
            self.xt = [self.xt[0], self.xt[0] + 1]
        self.yt = nice_ticks(min(ys), max(ys))
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
        self._frame(xlabel, ylabel)

    def px(self, x: float) -> float:
        v = math.log10(x) if self.logx else x
        lo, hi = self.xt[0], self.xt[-1]
        return self.x0 + (v - lo) / (hi - lo) * (self.x1 - self.x0)

    def py(self, y: float) -> float:
        lo, hi = self.yt[0], self.yt[-1]
        return self.y0 - (y - lo) / (hi - lo) * (self.y0 - self.y1)

    def _frame(self, xlabel: str, ylabel: str) -> None:
        c = self.c
        c.line(self.x0, self.y0, self.x1, self.y0)
        c.line(self.x0, self.y0, self.x0, self.y1)
        for t in self.xt:
            x = self.x0 + (t - self.xt[0]) / (self.xt[-1] - self.xt[0]) * (self.x1 - self.x0)
            c.line(x, self.y0, x, self.y0 + 5)
            c.text(x, self.y0 + 18, _tick_label(10**t if self.logx else t), "middle")
        for t in self.yt:
            y = self.py(t)
            c.line(self.x0 - 5, y, self.x0, y)
            c.line(self.x0, y, self.x1, y, "#dddddd")
            c.text(self.x0 - 8, y + 4, _tick_label(t), "end")
        c.text((self.x0 + self.x1) / 2, HEIGHT - 18, xlabel, "middle")
        c.text(18, (self.y0 + self.y1) / 2, ylabel, "middle",
               f' transform="rotate(-90 18 {_num((self.y0 + self.y1) / 2)})"')

    def series(self, pts: list[tuple[float, float]], color: str, markers: bool = True, dashed: bool = False) -> None:
        if not pts:
            return
        path = " ".join(f"{_num(self.px(x))},{_num(self.py(y))}" for x, y in pts)
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        self.c.add(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
        if markers:
            for x, y in pts:
                self.c.add(f'<circle cx="{_num(self.px(x))}" cy="{_num(self.py(y))}" r="4" fill="{color}"/>')

    def whisker(self, x: float, lo: float, hi: float, color: str) -> None:
        X, Y0, Y1 = self.px(x), self.py(lo), self.py(hi)
        self.c.line(X, Y0, X, Y1, color)
        self.c.line(X - 4, Y0, X + 4, Y0, color)
        self.c.line(X - 4, Y1, X + 4, Y1, color)

    def legend(self, entries: list[tuple[str, str, bool]]) -> None:
        x = self.x1 + 15
        for i, (label, color, dashed) in enumerate(entries):
            y = self.y1 + 10 + 18 * i
            self.c.line(x, y, x + 22, y, color, ' stroke-width="2"' + (' stroke-dasharray="6 4"' if dashed else ""))
            self.c.text(x + 28, y + 4, label)


def sweep_svg(rec: ExperimentRecord) -> str:
    rows = sweep_rows(rec)
    scratch = rec.tables.get("scratch")
    ys = [r["student_error_median"] + s * r["student_error_std"] for r in rows for s in (-1, 1)]
    if scratch:
        ys.append(scratch["median"])
    c = Canvas(f"Student {rec.spec.student.label}: error vs teacher size")
    ax = Axes(c, [r["params"] for r in rows], ys, "teacher parameters", "median student test error (%)", logx=True)
    for r in rows:
        m, s = r["student_error_median"], r["student_error_std"]
        ax.whisker(r["params"], m - s, m + s, PALETTE[0])
    ax.series([(r["params"], r["student_error_median"]) for r in rows], PALETTE[0])
    for r in rows:
        c.text(ax.px(r["params"]), ax.py(r["student_error_median"]) - 10, r["teacher"], "middle", ' font-size="10"')
    entries = [("KD student", PALETTE[0], False)]
    if scratch:
        xs = [rows[0]["params"], rows[-1]["params"]]
        ax.series([(x, scratch["median"]) for x in xs], PALETTE[1], markers=False, dashed=True)
        entries.append(("scratch", PALETTE[1], True))
    ax.legend(entries)
    return c.render()


def train_curve_svg(rec: ExperimentRecord) -> str:
    rows = train_curve_rows(rec)
    legs = [k for k in rows[0] if k != "epoch"]
    ys = [r[leg] for r in rows for leg in legs if r[leg] is not None]
    c = Canvas(f"{rec.kind}: test error per epoch (median over {len(rec.spec.seeds)} seeds)")
    ax = Axes(c, [r["epoch"] for r in rows], ys, "epoch", "test error (%)")
    if rec.kind == "eskd":
        sw = rec.tables.get("switch_epoch")
        if sw:
            ax.c.line(ax.px(sw), ax.y0, ax.px(sw), ax.y1, "#888888", ' stroke-dasharray="3 3"')
            ax.c.text(ax.px(sw) + 4, ax.y1 + 12, f"switch @ {sw}", extra=' font-size="10"')
    entries = []
    for i, leg in enumerate(legs):
        color = PALETTE[i % len(PALETTE)]
        ax.series([(r["epoch"], r[leg]) for r in rows if r[leg] is not None], color, markers=False)
        entries.append((leg, color, False))
    ax.legend(entries)
    return c.render()


def table_svg(title: str, rows: list[dict], columns: tuple[str, ...]) -> str:
    c = Canvas(title)
    col_w = (WIDTH - 40) / len(columns)
    y = 70
    for j, col in enumerate(columns):
        c.text(20 + col_w * (j + 0.5), y, col, "middle", ' font-weight="bold"')
    c.line(20, y + 8, WIDTH - 20, y + 8)
    for i, r in enumerate(rows):
        yy = y + 30 + 22 * i
        for j, col in enumerate(columns):
            v = r.get(col)
            s = f"{v:.4g}" if isinstance(v, float) else ("" if v is None else str(v))
            c.text(20 + col_w * (j + 0.5), yy, s, "middle")
    return c.render()


# entry point ---------------------------------------------------------------

def applicable(rec: ExperimentRecord) -> tuple[str, ...]:
    extra = {"sweep": ("sweep_curve",), "eskd": ("eskd_table",), "sequential_kd": ("sequential_table",)}
    return extra.get(rec.kind, ()) + ("train_curve",)


def render(rec: ExperimentRecord, kind: str) -> tuple[str, str]:
    """Return ``(csv_text, svg_text)`` for one report kind."""
    if kind not in KINDS:
        raise ReportError(f"unknown report kind {kind!r}; expected one of {KINDS}")
    derive_tables(rec)
    if kind == "sweep_curve":
        return to_csv(sweep_rows(rec)), sweep_svg(rec)
    if kind == "train_curve":
        rows = train_curve_rows(rec)
        return to_csv(rows), train_curve_svg(rec)
    if kind == "eskd_table":
        rows = eskd_rows(rec)
        return to_csv(rows, ESKD_COLUMNS), table_svg("Full KD vs early-stopped KD (medians)", rows, ESKD_COLUMNS)
    rows = sequential_rows(rec)
    return (to_csv(rows, SEQUENTIAL_COLUMNS),
            table_svg("Sequential distillation vs scratch (test error %)", rows, SEQUENTIAL_COLUMNS))


def write_report(record_dir, kind: str = "all", out_dir=None) -> list[Path]:
    """Write ``<kind>.csv`` and ``<kind>.svg``; ``kind="all"`` writes every kind the record supports."""
    record_dir = Path(record_dir)
    rec = load_record(record_dir)
    kinds = applicable(rec) if kind == "all" else (kind,)
    out = Path(out_dir) if out_dir is not None else record_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k in kinds:
        csv_text, svg_text = render(rec, k)
        cp, sp = out / f"{k}.csv", out / f"{k}.svg"
        cp.write_text(csv_text, encoding="utf-8")
        sp.write_text(svg_text, encoding="utf-8")
        written += [cp, sp]
    return written
