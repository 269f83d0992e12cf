"""Result tables and SVG bar charts from experiment ``results.csv`` rows.

All numbers are means over seeds. Relative reduction is
``(baseline - candidate) / baseline`` of the frame error rate.
"""

from __future__ import annotations

import csv
import io as _io
from collections import defaultdict
from html import escape
from pathlib import Path

from .io import atomic_write_text
from .mcmodel import relative_reduction

INIT_PAIRS = (("dsf", "dsf_random"), ("esf", "esf_random"))
MIC_SWEEP = (("dft1_ft", 1), ("esf", 2), ("esf_m4", 4))
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")


class ReportError(ValueError):
    pass


def _snr_key(bucket: str):
    return (0, 0.0) if bucket == "all" else (1, float(bucket))


def mean_errors(rows: list[dict]) -> dict[tuple[str, str], float]:
    """(model, snr bucket) -> mean frame error over seeds."""
    acc: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in rows:
        acc[(r["model"], str(r["snr_db"]))].append(float(r["frame_error"]))
    return {k: sum(v) / len(v) for k, v in acc.items()}


def models_in(rows: list[dict]) -> list[str]:
    seen: dict[str, None] = {}
    for r in rows:
        seen.setdefault(r["model"], None)
    return list(seen)


def reduction_table(rows: list[dict], baseline: str) -> list[dict]:
    """Relative frame-error reduction of every model against ``baseline``, per SNR bucket."""
    means = mean_errors(rows)
    models = models_in(rows)
    if baseline not in models:
        raise ReportError(f"baseline {baseline!r} not found in results")
    if len(models) < 2:
        raise ReportError("need at least two models to compare")
    buckets = sorted({b for _, b in means}, key=_snr_key)
    table = []
    for model in models:
        for b in buckets:
            if (model, b) not in means or (baseline, b) not in means:
                continue
            base = means[(baseline, b)]
            cand = means[(model, b)]
            red = relative_reduction(cand, base) if base > 0 else 0.0
            table.append({"model": model, "snr_db": b, "frame_error": cand, "baseline_error": base,
                          "relative_reduction": red})
    return table


def per_seed(rows: list[dict], model: str, bucket: str = "all") -> dict[int, float]:
    return {int(r["seed"]): float(r["frame_error"]) for r in rows
            if r["model"] == model and str(r["snr_db"]) == bucket}


def mic_sweep_table(rows: list[dict], sweep=MIC_SWEEP) -> list[dict]:
    table = []
    for model, mics in sweep:
        errs = per_seed(rows, model)
        if errs:
            table.append({"mics": mics, "model": model, "frame_error": sum(errs.values()) / len(errs),
                          "per_seed": errs})
    return table


def init_ablation_table(rows: list[dict], pairs=INIT_PAIRS) -> list[dict]:
    table = []
    for bf, rnd in pairs:
        a, b = per_seed(rows, bf), per_seed(rows, rnd)
        for seed in sorted(set(a) & set(b)):
            table.append({"variant": bf, "seed": seed, "beamformer_init": a[seed], "random_init": b[seed]})
    return table


def _csv(fields: list[str], records: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in records:
        w.writerow([f"{r[f]:.6f}" if isinstance(r[f], float) else r[f] for f in fields])
    return buf.getvalue()


def svg_bar_chart(title: str, groups: list[str], series: dict[str, list[float]], ylabel: str,
                  percent: bool = False) -> str:
    """Grouped vertical bar chart; negative values hang below the zero line."""
    left, right, top, bottom = 70, 150, 40, 60
    width = left + right + max(300, 22 * max(len(groups), 1) * max(len(series), 1))
    height = 360
    plot_w, plot_h = width - left - right, height - top - bottom
    values = [v for vs in series.values() for v in vs] or [0.0]
    hi, lo = max(max(values), 0.0), min(min(values), 0.0)
    span = (hi - lo) or 1.0
    hi, lo = hi + 0.05 * span, lo - (0.05 * span if lo < 0 else 0.0)
    span = hi - lo

    def y(v: float) -> float:
        return top + plot_h * (hi - v) / span

    def fmt(v: float) -> str:
        return f"{100 * v:.1f}%" if percent else f"{v:.3f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<text x="15" y="{top + plot_h / 2:.1f}" transform="rotate(-90 15 {top + plot_h / 2:.1f})" '
           f'text-anchor="middle">{escape(ylabel)}</text>']
    for i in range(5):
        v = lo + span * i / 4
        out.append(f'<line x1="{left}" x2="{left + plot_w}" y1="{y(v):.1f}" y2="{y(v):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 5}" y="{y(v) + 4:.1f}" text-anchor="end">{fmt(v)}</text>')
    out.append(f'<line x1="{left}" x2="{left + plot_w}" y1="{y(0):.1f}" y2="{y(0):.1f}" stroke="black"/>')
    n_series = max(len(series), 1)
    group_w = plot_w / max(len(groups), 1)
    bar_w = 0.8 * group_w / n_series
    for gi, g in enumerate(groups):
        x0 = left + gi * group_w + 0.1 * group_w
        for si, (name, vs) in enumerate(series.items()):
            v = vs[gi]
            top_y, bot_y = sorted((y(v), y(0)))
            out.append(f'<rect x="{x0 + si * bar_w:.1f}" y="{top_y:.1f}" width="{bar_w:.1f}" '
                       f'height="{bot_y - top_y:.1f}" fill="{PALETTE[si % len(PALETTE)]}">'
                       f'<title>{escape(name)} {escape(g)}: {fmt(v)}</title></rect>')
        out.append(f'<text x="{x0 + 0.4 * group_w:.1f}" y="{top + plot_h + 18}" '
                   f'text-anchor="middle">{escape(g)}</text>')
    for si, name in enumerate(series):
        ly = top + 10 + 18 * si
        out.append(f'<rect x="{width - right + 15}" y="{ly - 9}" width="12" height="12" '
                   f'fill="{PALETTE[si % len(PALETTE)]}"/>')
        out.append(f'<text x="{width - right + 32}" y="{ly + 1}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(rows: list[dict], out_dir, baseline: str = "lfbe") -> list[Path]:
    """Write reduction, mic-sweep and init-ablation tables (CSV) and charts (SVG)."""
    out = Path(out_dir)
    red = reduction_table(rows, baseline)
    written = []

    def emit(name: str, text: str):
        atomic_write_text(out / name, text)
        written.append(out / name)

    emit("reduction.csv", _csv(["model", "snr_db", "frame_error", "baseline_error", "relative_reduction"], red))
    buckets = sorted({r["snr_db"] for r in red}, key=_snr_key)
    models = [m for m in models_in(rows) if m != baseline]
    lookup = {(r["model"], r["snr_db"]): r["relative_reduction"] for r in red}
    series = {m: [lookup.get((m, b), 0.0) for b in buckets] for m in models}
    labels = [b if b == "all" else f"{b} dB" for b in buckets]
    emit("reduction.svg", svg_bar_chart(f"Relative frame-error reduction vs {baseline}", labels, series,
                                        "relative reduction", percent=True))

    sweep = mic_sweep_table(rows)
    if sweep:
        emit("mic_sweep.csv", _csv(["mics", "model", "frame_error"], sweep))
        emit("mic_sweep.svg", svg_bar_chart("Frame error by microphone count",
                                            [f"{r['mics']} mic" for r in sweep],
                                            {"frame error": [r["frame_error"] for r in sweep]},
                                            "frame error", percent=True))
    ablation = init_ablation_table(rows)
    if ablation:
        emit("init_ablation.csv", _csv(["variant", "seed", "beamformer_init", "random_init"], ablation))
        labels = [f"{r['variant']} s{r['seed']}" for r in ablation]
        emit("init_ablation.svg", svg_bar_chart("Beamformer vs random spatial-layer init", labels,
                                                {"beamformer init": [r["beamformer_init"] for r in ablation],
                                                 "random init": [r["random_init"] for r in ablation]},
                                                "frame error", percent=True))
    return written
