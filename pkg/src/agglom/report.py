"""Report writers: summary JSON, histogram CSV, and self-contained SVG plots."""

from __future__ import annotations

import json
import math
import os

import numpy as np

from .pipeline import MeasureResult, PsdStats, psd_stats


def write_sweep_csv(path, rows, x_key: str) -> None:
    """(x, mean, std) rows with a header line."""
    lines = ["x,mean,std"]
    for row in rows:
        lines.append(f"{row[x_key]},{float(row['mean'])!r},{float(row['std'])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def diameter_histogram(areas, n_bins: int = 24):
    """Log-spaced histogram over equivalent-circle diameters."""
    a = np.asarray(list(areas), dtype=np.float64)
    d = np.sqrt(4.0 * a / np.pi)
    lo, hi = d.min() * 0.9, d.max() * 1.1
    if lo <= 0 or lo == hi:
        lo, hi = max(lo, 1e-6), max(hi, 1e-5) * 1.1
    edges = np.geomspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(d, bins=edges)
    return edges, counts


def write_histogram_csv(path, edges, counts) -> None:
    lines = ["bin_lo,bin_hi,count"]
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        lines.append(f"{float(lo)!r},{float(hi)!r},{int(c)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _svg_header(width: int, height: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]


def svg_histogram(path, edges, counts, title: str = "") -> None:
    """Minimal standalone SVG bar plot (log-x bins drawn equal width)."""
    w, h, pad = 640, 400, 50
    parts = _svg_header(w, h)
    n = len(counts)
    peak = max(int(max(counts)), 1)
    bar_w = (w - 2 * pad) / max(n, 1)
    for i, c in enumerate(counts):
        bh = (h - 2 * pad) * (int(c) / peak)
        x = pad + i * bar_w
        y = h - pad - bh
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.9:.1f}" '
            f'height="{bh:.1f}" fill="#4878a8"/>'
        )
    parts.append(f'<line x1="{pad}" y1="{h-pad}" x2="{w-pad}" y2="{h-pad}" stroke="black"/>')
    parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h-pad}" stroke="black"/>')
    parts.append(f'<text x="{pad}" y="{pad - 14}" font-size="14">{title}</text>')
    parts.append(f'<text x="{pad}" y="{h - pad + 28}" font-size="11">'
                 f'{edges[0]:.1f} .. {edges[-1]:.1f} px (log bins)</text>')
    parts.append(f'<text x="{pad - 40}" y="{pad}" font-size="11">{peak}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def svg_line(path, xs, ys, title: str = "", log_x: bool = False) -> None:
    w, h, pad = 640, 400, 50
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    parts = _svg_header(w, h)
    xv = np.log10(xs) if log_x else xs
    x0, x1 = float(xv.min()), float(xv.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pts = []
    for x, y in zip(xv, ys):
        px = pad + (w - 2 * pad) * (x - x0) / (x1 - x0)
        py = h - pad - (h - 2 * pad) * (y - y0) / (y1 - y0)
        pts.append(f"{px:.1f},{py:.1f}")
    parts.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="#a84848" stroke-width="2"/>')
    for p in pts:
        px, py = p.split(",")
        parts.append(f'<circle cx="{px}" cy="{py}" r="3" fill="#a84848"/>')
    parts.append(f'<line x1="{pad}" y1="{h-pad}" x2="{w-pad}" y2="{h-pad}" stroke="black"/>')
    parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h-pad}" stroke="black"/>')
    parts.append(f'<text x="{pad}" y="{pad - 14}" font-size="14">{title}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def write_psd_report(out_dir, result: MeasureResult) -> dict:
    """summary.json plus the diameter histogram (CSV and SVG) and the audit."""
    os.makedirs(out_dir, exist_ok=True)
    summary: dict = {
        "n": len(result.areas),
        "included": result.included,
        "excluded": result.excluded,
        "errors": result.errored,
        "d_g_px": None,
        "sigma_g": None,
    }
    if result.areas:
        stats = psd_stats(result.areas)
        summary["d_g_px"] = stats.d_g
        summary["sigma_g"] = stats.sigma_g
        edges, counts = diameter_histogram(result.areas)
        write_histogram_csv(os.path.join(out_dir, "histogram.csv"), edges, counts)
        svg_histogram(os.path.join(out_dir, "histogram.svg"), edges, counts,
                      title=f"d_g={stats.d_g:.1f}px sigma_g={stats.sigma_g:.3f} n={stats.n}")
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "audit.jsonl"), "w") as fh:
        for record in result.records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return summary
