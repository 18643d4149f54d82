"""Forgetting experiments and report files (CSV, JSON summary, SVG line charts)."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn_core
from .config import ExperimentConfig
from .errors import FedBEError, InputError
from .expansion import expand
from .federation import MetricsSeries, Prepared, prepare, run_experiment
from .nn_core import ModelSpec

CSV_COLUMNS = ("round", "accuracy", "cum_seconds", "mean_assignment_size")


class ReportError(FedBEError, RuntimeError):
    """Output files could not be written."""


def forgetting_experiment(config: ExperimentConfig, methods: Sequence[str] | None = None,
                          prepared: Prepared | None = None) -> dict[str, MetricsSeries]:
    """Pretrain on the general task once, then federate the downstream task per method.

    Every method starts from the same pretrained backbone, so the forgetting
    degrees are directly comparable.
    """
    methods = list(config.compare if methods is None else methods)
    prep = prepare(config) if prepared is None else prepared
    return {m: run_experiment(config, prep, m) for m in methods}


def forgetting_degree(acc_before: float, acc_after: float) -> float:
    return acc_before - acc_after


def gradient_check_suite(seed: int = 0, spec: ModelSpec | None = None) -> list[tuple[str, float]]:
    """Finite-difference checks of the base model and of expanded models.

    Expanded blocks get small random outputs first; at their zero init the
    interior gradients vanish and would check nothing.
    """
    spec = ModelSpec() if spec is None else spec
    cases = [("base 2x16", ModelSpec(L=2, d=16, heads=2, d_ff=32, V=32, T_max=8, K=3)), ("base", spec)]
    results = []
    rng = np.random.default_rng(seed)
    for name, s in cases:
        model = nn_core.init_model(s, seed)
        tokens = rng.integers(0, s.V, size=(4, s.T_max))
        labels = rng.integers(0, s.K, size=4)
        results.append((name, nn_core.finite_diff_oracle(model, tokens, labels, "D", seed=seed)))
    positions = [1, spec.L] if spec.L > 1 else [1]
    base = nn_core.init_model(spec, seed)
    tokens = rng.integers(0, spec.V, size=(4, spec.T_max))
    labels = rng.integers(0, spec.K, size=4)
    for policy, mode in (("output-proj", "branch"), ("all-linear", "post-residual")):
        m = expand(base, positions, policy, mode)
        m = m.with_parameters({n: a + rng.uniform(-0.1, 0.1, a.shape)
                               for n, a in m.parameters().items() if n.startswith("expanded.")})
        results.append((f"expanded {policy} {mode}",
                        nn_core.finite_diff_oracle(m, tokens, labels, "D", seed=seed)))
    return results


# ---------------------------------------------------------------------------
# files


def metrics_csv(series: MetricsSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r, (acc, secs, size) in enumerate(zip(series.accuracy, series.cum_seconds,
                                              series.mean_assignment_size)):
        w.writerow([r, repr(acc), repr(secs), repr(size)])
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError(f"{path} holds no rounds")
    return {col: [float(row[col]) for row in rows] for col in CSV_COLUMNS}


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def emit_report(series: MetricsSeries, out_dir: str | Path) -> list[Path]:
    """Write metrics.csv, summary.json, accuracy.svg and time.svg into ``out_dir``."""
    if not series.records:
        raise InputError("cannot report an empty series")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc}") from exc
    files = {
        "metrics.csv": metrics_csv(series),
        "summary.json": json.dumps(series.summary(), indent=2, sort_keys=True) + "\n",
    }
    files.update(render_charts(read_rows(series), title=series.method))
    for name, text in files.items():
        _write(out / name, text)
    return [out / name for name in files]


def read_rows(series: MetricsSeries) -> dict[str, list[float]]:
    return {
        "round": list(map(float, range(len(series.records)))),
        "accuracy": series.accuracy,
        "cum_seconds": series.cum_seconds,
        "mean_assignment_size": series.mean_assignment_size,
    }


def render_charts(rows: Mapping[str, list[float]], title: str = "") -> dict[str, str]:
    return {
        "accuracy.svg": line_chart({title or "accuracy": (rows["round"], rows["accuracy"])},
                                   "round", "downstream accuracy"),
        "time.svg": line_chart({title or "accuracy": (rows["cum_seconds"], rows["accuracy"])},
                               "cumulative simulated seconds", "downstream accuracy"),
    }


def report_from_dir(in_dir: str | Path) -> list[Path]:
    """Re-render the SVG charts from an existing metrics.csv."""
    in_dir = Path(in_dir)
    rows = read_metrics_csv(in_dir / "metrics.csv")
    written = []
    for name, text in render_charts(rows, title=in_dir.name).items():
        _write(in_dir / name, text)
        written.append(in_dir / name)
    return written


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
W, H, PAD = 640, 400, 60


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
               x_label: str, y_label: str) -> str:
    """A minimal static SVG with axes, ticks, one polyline per series and a legend."""
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    if not xs:
        raise InputError("nothing to plot")
    if not all(map(math.isfinite, xs + ys)):
        raise InputError("non-finite values in chart data")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    if x1 == x0:
        x1 = x0 + 1.0

    def sx(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def sy(y):
        return H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        parts.append(f'<line x1="{sx(t):.2f}" y1="{H - PAD}" x2="{sx(t):.2f}" y2="{H - PAD + 5}" stroke="black"/>')
        parts.append(f'<text x="{sx(t):.2f}" y="{H - PAD + 20}" font-size="11" '
                     f'text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        parts.append(f'<line x1="{PAD - 5}" y1="{sy(t):.2f}" x2="{PAD}" y2="{sy(t):.2f}" stroke="black"/>')
        parts.append(f'<text x="{PAD - 8}" y="{sy(t) + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{_fmt(t)}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 15}" font-size="13" text-anchor="middle">{x_label}</text>')
    parts.append(f'<text x="18" y="{H / 2}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 18 {H / 2})">{y_label}</text>')
    for i, (name, (xv, yv)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xv, yv))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{W - PAD - 5}" y="{PAD + 15 * (i + 1)}" font-size="12" '
                     f'text-anchor="end" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def common_target(results: Mapping[str, MetricsSeries]) -> float:
    """Lowest final accuracy among the compared methods, so every method reaches it."""
    if not results:
        raise InputError("no results to compare")
    return min(s.final_accuracy for s in results.values())


def comparison_summary(results: Mapping[str, MetricsSeries]) -> dict:
    target = common_target(results)
    return {m: {"final_accuracy": s.final_accuracy, "forgetting": s.forgetting,
                "forgetting_expanded": s.forgetting_expanded,
                "general_acc_before": s.general_acc_before,
                "general_acc_after": s.general_acc_after,
                "general_acc_after_expanded": s.general_acc_after_expanded,
                "time_to_target": s.time_to_target(),
                "common_target": target,
                "time_to_common_target": s.time_to_target(target)}
            for m, s in results.items()}


def emit_comparison(results: Mapping[str, MetricsSeries], out_dir: str | Path) -> list[Path]:
    """One report subdirectory per method plus comparison.json and overlay charts."""
    out = Path(out_dir)
    written = []
    for method, series in results.items():
        written += emit_report(series, out / method)
    charts = {
        "accuracy.svg": line_chart({m: (list(map(float, range(len(s.records)))), s.accuracy)
                                    for m, s in results.items()}, "round", "downstream accuracy"),
        "time.svg": line_chart({m: (s.cum_seconds, s.accuracy) for m, s in results.items()},
                               "cumulative simulated seconds", "downstream accuracy"),
        "comparison.json": json.dumps(comparison_summary(results), indent=2, sort_keys=True) + "\n",
    }
    for name, text in charts.items():
        _write(out / name, text)
        written.append(out / name)
    return written
