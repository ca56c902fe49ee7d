"""Static SVG lead plots with a CSV sidecar of the plotted samples."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import LEAD_NAMES
from .data import EcgRecord
from .errors import ValidationError

DEFAULT_LEADS = ("I", "aVR", "V3")
WIDTH, PANEL_H, MARGIN = 900, 160, 40


def _polyline(y: np.ndarray, top: float) -> str:
    n = len(y)
    lo, hi = float(np.min(y)), float(np.max(y))
    span = hi - lo if hi > lo else 1.0
    xs = MARGIN + np.arange(n) * (WIDTH - 2 * MARGIN) / max(n - 1, 1)
    ys = top + PANEL_H - 10 - (y - lo) / span * (PANEL_H - 30)
    return " ".join(f"{x:.2f},{v:.2f}" for x, v in zip(xs, ys))


def lead_indices(leads) -> list[int]:
    unknown = [name for name in leads if name not in LEAD_NAMES]
    if unknown:
        raise ValidationError(f"unknown lead names {unknown}; expected a subset of {LEAD_NAMES}")
    if not leads:
        raise ValidationError("no leads requested")
    return [LEAD_NAMES.index(name) for name in leads]


def render_svg(record: EcgRecord, leads=DEFAULT_LEADS) -> str:
    idx = lead_indices(leads)
    height = PANEL_H * len(idx) + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
           f'viewBox="0 0 {WIDTH} {height}">',
           f'<rect width="{WIDTH}" height="{height}" fill="white"/>',
           f'<text x="{MARGIN}" y="14" font-family="sans-serif" font-size="12">'
           f'{record.patient_id} {record.label}</text>']
    for p, (name, i) in enumerate(zip(leads, idx)):
        top = 20 + p * PANEL_H
        out.append(f'<g id="lead-{name}">')
        out.append(f'<rect x="{MARGIN}" y="{top}" width="{WIDTH - 2 * MARGIN}" '
                   f'height="{PANEL_H - 6}" fill="none" stroke="#ccc"/>')
        out.append(f'<text x="4" y="{top + 20}" font-family="sans-serif" '
                   f'font-size="14">{name}</text>')
        out.append(f'<polyline fill="none" stroke="black" stroke-width="0.8" '
                   f'points="{_polyline(record.leads[i].astype(np.float64), top)}"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_leads(record: EcgRecord, out_path, leads=DEFAULT_LEADS) -> tuple[Path, Path]:
    """Write ``out_path`` (SVG) and ``out_path`` with a ``.csv`` suffix
    (columns lead, sample, value)."""
    leads = list(leads)
    svg = render_svg(record, leads)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg)
    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lead", "sample", "value"])
        for name, i in zip(leads, lead_indices(leads)):
            for t, v in enumerate(record.leads[i]):
                w.writerow([name, t, repr(float(v))])
    return out_path, csv_path
