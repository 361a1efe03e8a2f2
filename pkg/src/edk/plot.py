"""Stage-bar figures as plain SVG text (byte-stable for fixed inputs)."""

from __future__ import annotations

import colorsys
from html import escape
from typing import Sequence

import numpy as np

from edk.stages import StageVocabulary, segments_of

ROW_H = 22
ROW_GAP = 8
LABEL_W = 120
BAR_W = 800
LEGEND_H = 18


def palette(c: int) -> list[str]:
    """``c`` distinct hex colours spaced evenly in hue."""
    out = []
    for k in range(c):
        r, g, b = colorsys.hsv_to_rgb(k / c, 0.65, 0.9)
        out.append("#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255)))
    return out


def _fmt(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".")


def stage_bars_svg(rows: Sequence[tuple[str, Sequence[int]]], vocab: StageVocabulary) -> str:
    """One horizontal bar per ``(name, labels)`` row, coloured by stage, plus a legend."""
    if not rows:
        raise ValueError("need at least one row")
    T = len(rows[0][1])
    if any(len(labels) != T for _, labels in rows) or T == 0:
        raise ValueError("all rows must share the same non-zero length")
    colours = palette(vocab.c)
    per_legend = max(1, BAR_W // 90)
    legend_rows = -(-vocab.c // per_legend)
    height = len(rows) * (ROW_H + ROW_GAP) + legend_rows * LEGEND_H + 2 * ROW_GAP
    width = LABEL_W + BAR_W + 10
    scale = BAR_W / T
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    for r, (name, labels) in enumerate(rows):
        y = ROW_GAP + r * (ROW_H + ROW_GAP)
        out.append('<g class="row">')
        out.append(f'<text x="4" y="{y + ROW_H - 6}">{escape(name)}</text>')
        for seg in segments_of(np.asarray(labels, dtype=np.int64)):
            out.append(
                f'<rect x="{_fmt(LABEL_W + seg.start * scale)}" y="{y}" '
                f'width="{_fmt(seg.length * scale)}" height="{ROW_H}" fill="{colours[seg.stage]}">'
                f'<title>{escape(vocab.names[seg.stage])} [{seg.start}, {seg.end})</title></rect>'
            )
        out.append("</g>")
    top = ROW_GAP + len(rows) * (ROW_H + ROW_GAP)
    for k, name in enumerate(vocab.names):
        x = LABEL_W + (k % per_legend) * 90
        y = top + (k // per_legend) * LEGEND_H
        out.append(f'<rect class="swatch" fill="{colours[k]}" x="{x}" y="{y}" width="12" height="12"/>')
        out.append(f'<text x="{x + 16}" y="{y + 11}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
