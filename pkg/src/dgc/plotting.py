"""Dependency-free SVG rendering of ROC curves."""

from __future__ import annotations

from typing import Mapping
from xml.sax.saxutils import escape

from .metrics import RocReport

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _polyline(fpr, tpr, x0, y0, size) -> str:
    return " ".join(f"{x0 + f * size:.2f},{y0 + (1 - t) * size:.2f}" for f, t in zip(fpr, tpr))


def roc_svg(reports: Mapping[str, RocReport], panel: int = 160, columns: int = 5) -> str:
    """One small panel per label, one colored curve per run, chance diagonal dashed."""
    runs = list(reports)
    labels = list(next(iter(reports.values())).label_names) if runs else []
    pad = 28
    cell = panel + 2 * pad
    rows = max(1, -(-len(labels) // columns))
    legend = 20 * len(runs) + 10
    width, height = columns * cell, rows * cell + legend
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i, label in enumerate(labels):
        x0 = (i % columns) * cell + pad
        y0 = (i // columns) * cell + pad
        out.append(f'<rect x="{x0}" y="{y0}" width="{panel}" height="{panel}" fill="none" stroke="#888"/>')
        out.append(
            f'<line x1="{x0}" y1="{y0 + panel}" x2="{x0 + panel}" y2="{y0}" stroke="#bbb" stroke-dasharray="4 3"/>'
        )
        aucs = []
        for k, run in enumerate(runs):
            rep = reports[run]
            curve = rep.curves.get(label)
            if curve is None:
                continue
            color = _COLORS[k % len(_COLORS)]
            pts = _polyline(curve.fpr, curve.tpr, x0, y0, panel)
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            aucs.append(f"{rep.aucs[label]:.3f}")
        text = escape(label) + (f" ({'/'.join(aucs)})" if aucs else " (n/a)")
        out.append(f'<text x="{x0}" y="{y0 - 6}">{text}</text>')
    for k, run in enumerate(runs):
        y = rows * cell + 10 + 20 * k
        color = _COLORS[k % len(_COLORS)]
        out.append(f'<line x1="{pad}" y1="{y}" x2="{pad + 24}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        mean = reports[run].mean_auc
        out.append(f'<text x="{pad + 30}" y="{y + 4}">{escape(run)}: mean AUC {mean:.4f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
