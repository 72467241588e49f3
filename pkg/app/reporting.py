# app/reporting.py
"""
Module: reporting.py

Turns metrics CSVs into a convergence chart, a sweep chart with ±std
whiskers and a markdown summary. Charts are plain SVG rendered from Jinja2
templates in ``app/templates``; every coordinate is printed with a fixed
precision, so identical inputs give identical bytes. Every output carries
the manifests of the runs it was drawn from in ``<!-- manifest -->`` comments.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape
from markupsafe import Markup

from app.experiments import ablation_table, format_float, header_comment, read_metrics_csv
from app.trainer import MetricsRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

APP_DIR = Path(__file__).resolve().parent
TEMPLATE_ENV = Environment(
    loader=FileSystemLoader(str(APP_DIR / "templates")),
    autoescape=select_autoescape(enabled_extensions=("svg.j2",), default_for_string=False),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 60, 150, 30, 50


@dataclass(frozen=True)
class RunFile:
    path: Path
    manifest: Dict[str, str]
    records: List[MetricsRecord]

    @property
    def run_id(self) -> str:
        return self.manifest.get("run_id") or (self.records[0].run_id if self.records else self.path.stem)

    @property
    def sweep(self) -> Optional[Tuple[str, float]]:
        if "sweep_vary" not in self.manifest or "sweep_value" not in self.manifest:
            return None
        return self.manifest["sweep_vary"], float(self.manifest["sweep_value"])


@dataclass(frozen=True)
class SeriesPoint:
    epoch: int
    mean: float


@dataclass(frozen=True)
class SweepPoint:
    value: float
    mean: float
    std: float
    n_seeds: int


def load_runs(paths: Iterable[PathLike]) -> List[RunFile]:
    """Read every CSV; raises ValueError("no runs found") when there is none."""
    runs = []
    for path in sorted({Path(p) for p in paths}):
        manifest, records = read_metrics_csv(path)
        logger.debug(f"Loaded {len(records)} records from {path}")
        runs.append(RunFile(path, manifest, records))
    if not runs:
        logger.error("Report requested but no runs found")
        raise ValueError("no runs found")
    return runs


def final_records(records: Sequence[MetricsRecord]) -> List[MetricsRecord]:
    """Last evaluated record of each seed, ordered by seed."""
    last: Dict[int, MetricsRecord] = {}
    for record in records:
        if record.seed not in last or record.epoch >= last[record.seed].epoch:
            last[record.seed] = record
    return [last[seed] for seed in sorted(last)]


def convergence_series(runs: Sequence[RunFile]) -> Dict[str, List[SeriesPoint]]:
    """Per run id: target accuracy at each epoch, averaged over seeds."""
    grouped: Dict[str, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for run in runs:
        for record in run.records:
            grouped[run.run_id][record.epoch].append(record.target_accuracy)
    return {
        label: [SeriesPoint(epoch, float(np.mean(values))) for epoch, values in sorted(epochs.items())]
        for label, epochs in sorted(grouped.items())
    }


def sweep_points(runs: Sequence[RunFile]) -> Dict[str, List[SweepPoint]]:
    """Per swept weight: mean and population std of final target accuracy for each value."""
    finals: Dict[str, Dict[float, List[float]]] = defaultdict(lambda: defaultdict(list))
    for run in runs:
        if run.sweep is None:
            continue
        vary, value = run.sweep
        finals[vary][value].extend(r.target_accuracy for r in final_records(run.records))
    return {
        vary: [
            SweepPoint(value, float(np.mean(accs)), float(np.std(accs)), len(accs))
            for value, accs in sorted(by_value.items())
        ]
        for vary, by_value in sorted(finals.items())
    }


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _y(acc: float) -> float:
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    return MARGIN_TOP + (1.0 - acc) * plot_h


def _y_ticks() -> List[Dict[str, str]]:
    return [{"y": _fmt(_y(t)), "label": f"{int(round(100 * t))}%"} for t in np.linspace(0.0, 1.0, 6)]


def _comments(manifests: Iterable[Dict[str, str]]) -> List[Markup]:
    return [Markup(header_comment(fields)) for fields in manifests]


def _frame() -> Dict[str, object]:
    return {
        "width": WIDTH,
        "height": HEIGHT,
        "left": MARGIN_LEFT,
        "right": WIDTH - MARGIN_RIGHT,
        "top": MARGIN_TOP,
        "bottom": HEIGHT - MARGIN_BOTTOM,
        "y_ticks": _y_ticks(),
    }


def render_convergence_svg(
    series: Dict[str, List[SeriesPoint]],
    title: str = "Target accuracy per epoch",
    manifests: Sequence[Dict[str, str]] = (),
) -> str:
    max_epoch = max((p.epoch for points in series.values() for p in points), default=1)
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT

    def x(epoch: int) -> float:
        if max_epoch == 1:
            return MARGIN_LEFT + plot_w / 2
        return MARGIN_LEFT + (epoch - 1) / (max_epoch - 1) * plot_w

    step = max(1, -(-max_epoch // 10))
    x_ticks = [{"x": _fmt(x(e)), "label": str(e)} for e in range(1, max_epoch + 1, step)]
    lines = []
    for i, (label, points) in enumerate(series.items()):
        lines.append(
            {
                "label": label,
                "color": PALETTE[i % len(PALETTE)],
                "points": " ".join(f"{_fmt(x(p.epoch))},{_fmt(_y(p.mean))}" for p in points),
                "markers": [{"x": _fmt(x(p.epoch)), "y": _fmt(_y(p.mean)), "value": format_float(p.mean)} for p in points],
                "legend_y": _fmt(MARGIN_TOP + 10 + 18 * i),
            }
        )
    return TEMPLATE_ENV.get_template("convergence.svg.j2").render(
        title=title, x_label="epoch", x_ticks=x_ticks, series=lines, manifests=_comments(manifests), **_frame()
    )


def render_sweep_svg(vary: str, points: Sequence[SweepPoint], manifests: Sequence[Dict[str, str]] = ()) -> str:
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    slot = plot_w / max(1, len(points))
    bars = []
    for i, point in enumerate(points):
        cx = MARGIN_LEFT + slot * (i + 0.5)
        low, high = point.mean - point.std, point.mean + point.std
        bars.append(
            {
                "x": _fmt(cx),
                "y": _fmt(_y(point.mean)),
                "y_low": _fmt(_y(low)),
                "y_high": _fmt(_y(high)),
                "label": format_float(point.value),
                "mean": format_float(point.mean),
                "std": format_float(point.std),
            }
        )
    polyline = " ".join(f"{b['x']},{b['y']}" for b in bars)
    return TEMPLATE_ENV.get_template("sweep.svg.j2").render(
        title=f"Target accuracy vs {vary}", x_label=vary, bars=bars, polyline=polyline, color=PALETTE[0],
        manifests=_comments(manifests), **_frame()
    )


def render_summary_md(runs: Sequence[RunFile], sweeps: Dict[str, List[SweepPoint]]) -> str:
    rows = []
    by_id: Dict[str, List[RunFile]] = defaultdict(list)
    for run in runs:
        by_id[run.run_id].append(run)
    for run_id, files in sorted(by_id.items()):
        finals = [r for f in files for r in final_records(f.records)]
        target = np.array([r.target_accuracy for r in finals]) if finals else np.zeros(1)
        pretext = np.array([r.pretext_accuracy for r in finals]) if finals else np.zeros(1)
        manifest = files[0].manifest
        rows.append(
            {
                "run_id": run_id,
                "method": manifest.get("method", "?"),
                "seeds": len(finals),
                "epochs": max((r.epoch for r in finals), default=0),
                "target": f"{100 * target.mean():.2f} ± {100 * target.std():.2f}",
                "pretext": f"{100 * pretext.mean():.2f}",
                "checksum": manifest.get("dataset_checksum", "")[:12],
            }
        )
    tables = [
        {
            "vary": vary,
            "markdown": ablation_table(vary, [p.value for p in points], [p.mean for p in points], [p.std for p in points]),
        }
        for vary, points in sweeps.items()
    ]
    return TEMPLATE_ENV.get_template("summary.md.j2").render(
        rows=rows, tables=tables, manifests=_comments(run.manifest for run in runs)
    )


def write_report(paths: Iterable[PathLike], out_dir: PathLike) -> List[Path]:
    """Write ``convergence.svg``, one ``sweep_<var>.svg`` per swept weight and ``summary.md``."""
    runs = load_runs(paths)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    convergence = out / "convergence.svg"
    convergence.write_text(render_convergence_svg(convergence_series(runs), manifests=[run.manifest for run in runs]), encoding="utf-8")
    written.append(convergence)
    sweeps = sweep_points(runs)
    for vary, points in sweeps.items():
        path = out / f"sweep_{vary}.svg"
        swept = [run.manifest for run in runs if run.sweep is not None and run.sweep[0] == vary]
        path.write_text(render_sweep_svg(vary, points, swept), encoding="utf-8")
        written.append(path)
    summary = out / "summary.md"
    summary.write_text(render_summary_md(runs, sweeps), encoding="utf-8")
    written.append(summary)
    logger.info(f"Report from {len(runs)} CSV files written to {out}")
    return written
