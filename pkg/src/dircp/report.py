"""Deterministic CSV / JSON / SVG emission for evaluation results."""

from __future__ import annotations

import json
from pathlib import Path

from .evaluate import SeedResult, SweepResult, SweepRow

_SERIES_COLORS = ("#1f6fb2", "#d1495b", "#3a7d44", "#8e5fa8", "#c98a2b", "#4a4a4a")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def per_seed_csv(results: list[SeedResult], thresholds) -> str:
    n_dir = len(results[0].mask) if results else 0
    cols = ["method", "seed", "budget", "sigma", "bytes", "n_predictions",
            "n_truths", "mask"]
    for t in thresholds:
        cols.append(f"ap@{t:g}")
    for t in thresholds:
        cols += [f"pd{t:g}_s{i}" for i in range(n_dir)]
        cols.append(f"masked{t:g}")
    lines = [",".join(cols)]
    for r in results:
        row = [r.method, str(r.seed), _fmt(r.budget), _fmt(r.loss_sigma),
               str(r.bytes_transmitted), str(r.n_predictions), str(r.n_truths),
               "".join(str(b) for b in r.mask)]
        for t in thresholds:
            row.append(_fmt(r.ap_at_iou[t]))
        for t in thresholds:
            row += [_fmt(v) for v in r.ap_at_pd_iou[t]]
            row.append(_fmt(r.masked_sector_ap(t)))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def sweep_csv(result: SweepResult, thresholds) -> str:
    rows = result.rows
    n_dir = len(rows[0].mean_ap_at_pd_iou[thresholds[0]]) if rows else 0
    cols = ["budget", "sigma", "method", "n_seeds", "total_bytes"]
    for t in thresholds:
        cols.append(f"mean_ap@{t:g}")
    for t in thresholds:
        cols += [f"mean_pd{t:g}_s{i}" for i in range(n_dir)]
        cols.append(f"mean_masked{t:g}")
    lines = [",".join(cols)]
    for row in rows:
        cells = [_fmt(row.budget), _fmt(row.loss_sigma), row.method,
                 str(row.n_seeds), str(row.total_bytes)]
        for t in thresholds:
            cells.append(_fmt(row.mean_ap_at_iou[t]))
        for t in thresholds:
            cells += [_fmt(v) for v in row.mean_ap_at_pd_iou[t]]
            cells.append(_fmt(row.mean_masked_ap[t]))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _row_dict(row: SweepRow) -> dict:
    return {
        "budget": row.budget, "sigma": row.loss_sigma, "method": row.method,
        "n_seeds": row.n_seeds, "total_bytes": row.total_bytes,
        "mean_ap_at_iou": {str(k): v for k, v in sorted(row.mean_ap_at_iou.items())},
        "mean_ap_at_pd_iou": {str(k): list(v)
                              for k, v in sorted(row.mean_ap_at_pd_iou.items())},
        "mean_masked_ap": {str(k): v for k, v in sorted(row.mean_masked_ap.items())},
    }


def seed_result_dict(r: SeedResult) -> dict:
    d = r.core_dict()
    d["method"] = r.method
    d["sigma"] = r.loss_sigma
    return d


def sweep_json(result: SweepResult) -> str:
    payload = {
        "conventions": result.conventions,
        "rows": [_row_dict(r) for r in result.rows],
        "per_seed": [seed_result_dict(r) for r in result.per_seed],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def run_report_json(results: list[SeedResult], conventions: dict) -> str:
    payload = {
        "conventions": dict(conventions),
        "results": [seed_result_dict(r) for r in results],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def svg_line_chart(series: dict[str, list[tuple[float, float]]], title: str,
                   x_label: str, y_label: str) -> str:
    """Minimal standalone SVG line chart; output bytes are reproducible."""
    width, height = 640, 480
    ml, mr, mt, mb = 70, 20, 40, 50
    plot_w, plot_h = width - ml - mr, height - mt - mb
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y_lo, y_hi = 0.0, max(1.0, max(ys) if ys else 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return mt + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{title}</text>',
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" '
        f'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black"/>',
        f'<text x="{ml + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{x_label}</text>',
        f'<text x="18" y="{mt + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 18 {mt + plot_h / 2:.1f})">{y_label}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<line x1="{ml}" y1="{py(y):.2f}" x2="{ml + plot_w}" '
                     f'y2="{py(y):.2f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{ml - 8}" y="{py(y) + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{y:.2f}</text>')
    for xv in sorted({p[0] for pts in series.values() for p in pts}):
        parts.append(f'<text x="{px(xv):.2f}" y="{mt + plot_h + 18}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{xv:g}</text>')
    for idx, (name, pts) in enumerate(sorted(series.items())):
        color = _SERIES_COLORS[idx % len(_SERIES_COLORS)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                         f'fill="{color}"/>')
        ly = mt + 16 + 16 * idx
        parts.append(f'<line x1="{ml + plot_w - 150}" y1="{ly}" '
                     f'x2="{ml + plot_w - 126}" y2="{ly}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{ml + plot_w - 120}" y="{ly + 4}" '
                     f'font-family="sans-serif" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def budget_curve_svg(result: SweepResult, threshold: float, sigma: float,
                     metric: str = "ap") -> str:
    """One series per method: mean AP (or masked AP) against the budget."""
    series: dict[str, list[tuple[float, float]]] = {}
    for row in result.rows:
        if row.loss_sigma != sigma:
            continue
        if metric == "ap":
            y = row.mean_ap_at_iou[threshold]
        elif metric == "masked":
            y = row.mean_masked_ap[threshold]
        else:
            raise ValueError(f"unknown metric {metric!r}")
        series.setdefault(row.method, []).append((row.budget, y))
    label = "AP" if metric == "ap" else "masked-sector AP"
    return svg_line_chart(series, f"{label} @ IoU {threshold:g} (sigma={sigma:g})",
                          "communication budget", label)


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")
