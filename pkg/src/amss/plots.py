"""Deterministic SVG line charts built from metrics CSV files.

The markup is assembled by hand with fixed number formatting, so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=150, top=40, bottom=48)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")

Series = Tuple[Sequence[float], Sequence[float]]


class PlotError(ValueError):
    pass


def _num(x: float) -> str:
    return f"{x:.2f}"


def _bounds(values: List[float]) -> Tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi - lo < 1e-12:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    return lo, hi


def line_chart(series: Dict[str, Series], title: str, xlabel: str, ylabel: str) -> str:
    """Render one polyline per entry of ``series`` (insertion order)."""
    clean = {}
    for name, (xs, ys) in series.items():
        pts = [(float(x), float(y)) for x, y in zip(xs, ys)
               if math.isfinite(float(x)) and math.isfinite(float(y))]
        if pts:
            clean[name] = pts
    if not clean:
        raise PlotError(f"nothing to plot for {title!r}")
    x0, x1 = _bounds([p[0] for pts in clean.values() for p in pts])
    y0, y1 = _bounds([p[1] for pts in clean.values() for p in pts])
    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{_num(sx(fx))}" y="{top + ph + 16}" text-anchor="middle">{fx:.3g}</text>')
        out.append(f'<text x="{left - 6}" y="{_num(sy(fy) + 4)}" text-anchor="end">{fy:.3g}</text>')
        out.append(f'<line x1="{left}" y1="{_num(sy(fy))}" x2="{left + pw}" y2="{_num(sy(fy))}" '
                   f'stroke="#ddd"/>')
    out.append(f'<text x="{left + pw // 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph // 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph // 2})">{escape(ylabel)}</text>')
    for i, (name, pts) in enumerate(clean.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in pts)
        out.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{coords}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 36}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_metrics(path) -> Tuple[List[str], List[Dict[str, float]]]:
    path = Path(path)
    if not path.is_file():
        raise PlotError(f"metrics file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = list(reader.fieldnames or [])
        rows = [{k: float(v) for k, v in row.items()} for row in reader]
    if not rows:
        raise PlotError(f"{path} has no data rows")
    return columns, rows


def _require(columns: Sequence[str], needed: Sequence[str], path) -> None:
    missing = [c for c in needed if c not in columns]
    if missing:
        raise PlotError(f"{path} is missing columns: {', '.join(missing)}")


def _modalities(columns: Sequence[str]) -> int:
    return sum(1 for c in columns if c.startswith("test_branch_acc_"))


def run_charts(metrics_path) -> Dict[str, str]:
    """Loss, imbalance and branch-accuracy charts for one run."""
    columns, rows = read_metrics(metrics_path)
    K = _modalities(columns)
    needed = ["epoch", "train_loss", "imbalance", "test_acc"] + [f"test_branch_acc_{k}" for k in range(K)]
    _require(columns, needed, metrics_path)
    if K == 0:
        raise PlotError(f"{metrics_path} is missing columns: test_branch_acc_0")
    ep = [r["epoch"] for r in rows]
    branches = {"joint": (ep, [r["test_acc"] for r in rows])}
    for k in range(K):
        branches[f"modality {k}"] = (ep, [r[f"test_branch_acc_{k}"] for r in rows])
    return {
        "loss.svg": line_chart({"train": (ep, [r["train_loss"] for r in rows])},
                               "Training loss", "epoch", "loss"),
        "imbalance.svg": line_chart({"u0/u1": (ep, [r["imbalance"] for r in rows])},
                                    "Imbalance degree", "epoch", "u ratio"),
        "branches.svg": line_chart(branches, "Test accuracy by branch", "epoch", "accuracy"),
    }


def emit_plots(run_dir) -> List[Path]:
    """Write the per-run SVGs next to ``metrics.csv``. Nothing is written on error."""
    run_dir = Path(run_dir)
    charts = run_charts(run_dir / "metrics.csv")
    written = []
    for name, svg in charts.items():
        path = run_dir / name
        path.write_text(svg, encoding="utf-8")
        written.append(path)
    return written


def comparison_chart(runs: Dict[str, Path], column: str = "train_loss") -> str:
    """One polyline per labelled run directory."""
    series = {}
    for label, run_dir in runs.items():
        path = Path(run_dir) / "metrics.csv"
        columns, rows = read_metrics(path)
        _require(columns, ["epoch", column], path)
        series[label] = ([r["epoch"] for r in rows], [r[column] for r in rows])
    return line_chart(series, f"{column} by run", "epoch", column)
