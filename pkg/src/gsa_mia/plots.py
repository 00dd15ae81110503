"""Minimal, byte-stable SVG charts for ROC curves and sweep tables."""

from __future__ import annotations

import csv
import math
from pathlib import Path

from .metrics import read_roc_csv

W, H, PAD = 360, 360, 40
LOG_FLOOR = 1e-4


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#000"/>',
        f'<text x="{W / 2}" y="{PAD / 2}" text-anchor="middle" font-size="12">{title}</text>',
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="12" y="{H / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 12 {H / 2})">{ylabel}</text>',
    ]


def _x(u: float) -> float:
    return PAD + u * (W - 2 * PAD)


def _y(v: float) -> float:
    return H - PAD - v * (H - 2 * PAD)


def roc_svg(fpr, tpr, log_fpr: bool = False, title: str = "ROC") -> str:
    if log_fpr:
        lo = math.log10(LOG_FLOOR)
        xs = [(math.log10(max(f, LOG_FLOOR)) - lo) / -lo for f in fpr]
    else:
        xs = list(fpr)
    pts = " ".join(f"{_fmt(_x(a))},{_fmt(_y(b))}" for a, b in zip(xs, tpr))
    out = _frame(title, "FPR (log)" if log_fpr else "FPR", "TPR")
    out.append(f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_svg(xs, series: dict, title: str, xlabel: str) -> str:
    """Line chart of metric series (values in [0, 1]) against sweep values."""
    out = _frame(title, xlabel, "metric")
    n = len(xs)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for k, (name, ys) in enumerate(series.items()):
        u = [(i / (n - 1)) if n > 1 else 0.5 for i in range(n)]
        pts = " ".join(f"{_fmt(_x(a))},{_fmt(_y(b))}" for a, b in zip(u, ys))
        c = colors[k % len(colors)]
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{PAD + 6}" y="{PAD + 14 + 14 * k}" font-size="10" fill="{c}">{name}</text>')
    for i, v in enumerate(xs):
        a = (i / (n - 1)) if n > 1 else 0.5
        out.append(f'<text x="{_fmt(_x(a))}" y="{H - PAD + 14}" text-anchor="middle" font-size="10">{v}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_roc_plot(roc_csv, svg_path, log_fpr: bool = False) -> None:
    if not Path(roc_csv).exists():
        raise FileNotFoundError(f"ROC CSV not found: {roc_csv}")
    curve = read_roc_csv(roc_csv)
    Path(svg_path).write_text(roc_svg(curve.fpr.tolist(), curve.tpr.tolist(), log_fpr))


def emit_sweep_plot(table_csv, svg_path) -> None:
    if not Path(table_csv).exists():
        raise FileNotFoundError(f"sweep table not found: {table_csv}")
    with open(table_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    xs = [r["axis_value"] for r in rows]
    series = {m: [float(r[m]) for r in rows] for m in ("asr", "auc", "tpr1", "tpr01")}
    Path(svg_path).write_text(sweep_svg(xs, series, f"sweep: {Path(table_csv).stem}", "axis value"))
