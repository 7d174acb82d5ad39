"""Deterministic CSV / JSON writers and minimal hand-built SVG charts."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from typing import Iterable, Mapping, Sequence

from .corpus_io import atomic_write_text, format_float

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return format_float(v)
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json_text(obj))


def _esc(s: str) -> str:
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return 0.0, 1.0
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _frame(width, height, title, x_label, y_label, y_lo, y_hi, margin):
    left, top, right, bottom = margin
    pw, ph = width - left - right, height - top - bottom
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{_esc(x_label)}</text>',
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{_esc(y_label)}</text>',
    ]
    for i in range(5):
        v = y_lo + (y_hi - y_lo) * i / 4
        y = top + ph - ph * i / 4
        parts.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{v:.3g}</text>')
    return parts, (left, top, pw, ph)


def line_chart_svg(series: Mapping[str, Sequence[tuple[float, float]]], title: str = "",
                   x_label: str = "layer", y_label: str = "score",
                   width: int = 560, height: int = 340) -> str:
    """One polyline per series; x values are shared integer positions (e.g. layer indices)."""
    pts = [p for s in series.values() for p in s]
    xs = sorted({p[0] for p in pts}) or [0]
    y_lo, y_hi = _nice_range(min((p[1] for p in pts), default=0.0), max((p[1] for p in pts), default=1.0))
    margin = (56, 28, 120, 40)
    parts, (left, top, pw, ph) = _frame(width, height, title, x_label, y_label, y_lo, y_hi, margin)
    x_lo, x_hi = xs[0], xs[-1] if xs[-1] != xs[0] else xs[0] + 1

    def px(x):
        return left + pw * (x - x_lo) / (x_hi - x_lo)

    def py(y):
        return top + ph - ph * (y - y_lo) / (y_hi - y_lo)

    for x in xs:
        parts.append(f'<text x="{px(x):.2f}" y="{top + ph + 14}" text-anchor="middle">{_cell(x)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in s)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in s:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="2.5" fill="{color}"/>')
        ly = top + 12 + 16 * i
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart_svg(values: Sequence[float], labels: Sequence | None = None, title: str = "",
                  x_label: str = "layer", y_label: str = "weight",
                  width: int = 520, height: int = 320) -> str:
    labels = list(range(len(values))) if labels is None else list(labels)
    y_lo, y_hi = 0.0, max(max(values, default=0.0), 1e-9) * 1.05
    margin = (56, 28, 16, 40)
    parts, (left, top, pw, ph) = _frame(width, height, title, x_label, y_label, y_lo, y_hi, margin)
    n = max(len(values), 1)
    slot = pw / n
    for i, (v, lab) in enumerate(zip(values, labels)):
        h = ph * (v - y_lo) / (y_hi - y_lo)
        x = left + slot * i + 0.15 * slot
        parts.append(f'<rect x="{x:.2f}" y="{top + ph - h:.2f}" width="{0.7 * slot:.2f}" '
                     f'height="{h:.2f}" fill="{PALETTE[0]}"/>')
        parts.append(f'<text x="{left + slot * (i + 0.5):.2f}" y="{top + ph + 14}" '
                     f'text-anchor="middle">{_esc(lab)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_text(path, text)
