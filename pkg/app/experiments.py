# app/experiments.py
"""
Module: experiments.py

The experiment layer behind the command line:

- Method templates: which loss weights each method may use
  (source_only, rot, rot_entmin, full).
- RunManifest: provenance embedded as ``# key=value`` lines at the top of
  every CSV and checkpoint sidecar this package writes, and as a comment
  block in its markdown and SVG files.
- Config precedence: CLI flags > ``key = value`` config file > defaults.
- Metrics CSV writing (``MetricsSink``) and reading (``read_metrics_csv``).
- Single runs, ablation sweeps and feature export.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import re
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from app import __version__
from app import autodiff as ad
from app.datagen import DatasetSpec, DomainDataset, spec_from_meta, stack_images
from app.errors import ReportFormatError, ShapeError, TemplateMismatchError
from app.losses import LossWeights
from app.network import MultiHeadNet, arch_from_state, encode, save_checkpoint
from app.trainer import (
    ExperimentSummary,
    MetricsRecord,
    RunResult,
    RunTask,
    TrainConfig,
    run_tasks,
    seed_tasks,
    summarize,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CSV_COLUMNS = (
    "run_id",
    "seed",
    "epoch",
    "loss_main",
    "loss_pretext",
    "loss_consistency",
    "loss_entropy",
    "loss_total",
    "target_acc",
    "pretext_acc",
    "wall_time_s",
)
# CSV column -> MetricsRecord field
_COLUMN_FIELDS = {"target_acc": "target_accuracy", "pretext_acc": "pretext_accuracy"}
EPOCH_ZERO = datetime(1970, 1, 1, tzinfo=timezone.utc)


def format_float(value: float) -> str:
    """Nine significant digits, '.' as decimal point regardless of locale."""
    return f"{value:.9g}"


# ----------------------------------------------------------------------
# method templates
# ----------------------------------------------------------------------
class Method(str, enum.Enum):
    SOURCE_ONLY = "source_only"
    ROT = "rot"
    ROT_ENTMIN = "rot_entmin"
    FULL = "full"


WEIGHT_NAMES = ("lambda_p", "lambda_c", "lambda_e")
METHOD_TERMS: Dict[Method, Tuple[str, ...]] = {
    Method.SOURCE_ONLY: (),
    Method.ROT: ("lambda_p",),
    Method.ROT_ENTMIN: ("lambda_p", "lambda_e"),
    Method.FULL: ("lambda_p", "lambda_c", "lambda_e"),
}


def weights_for_method(method: Union[Method, str], **supplied: Optional[float]) -> LossWeights:
    """
    Build the loss weights a method allows.

    Terms outside the method's template are forced to 0 and may not be
    supplied; allowed terms take the supplied value or the default.

    Example:
    >>> weights_for_method("rot", lambda_p=0.5).as_tuple()
    (0.5, 0.0, 0.0)
    """
    method = Method(method)
    allowed = METHOD_TERMS[method]
    given = {k: v for k, v in supplied.items() if v is not None}
    unknown = set(given) - set(WEIGHT_NAMES)
    if unknown:
        raise ValueError(f"unknown loss weights {sorted(unknown)}")
    rejected = sorted(k for k in given if k not in allowed)
    if rejected:
        logger.error(f"Method {method.value} does not accept {rejected}")
        raise TemplateMismatchError(f"method {method.value} does not accept {', '.join(rejected)}")
    defaults = LossWeights()
    return LossWeights(**{k: given.get(k, getattr(defaults, k)) if k in allowed else 0.0 for k in WEIGHT_NAMES})


def check_template(method: Method, weights: LossWeights) -> None:
    for name in WEIGHT_NAMES:
        if name not in METHOD_TERMS[method] and getattr(weights, name) != 0.0:
            raise TemplateMismatchError(f"method {method.value} requires {name}=0")


# ----------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------
class RunManifest(BaseModel):
    run_id: str = Field(..., min_length=1)
    method: Method
    config: TrainConfig
    n_seeds: int = Field(1, ge=1)
    dataset_spec: Optional[DatasetSpec] = None
    dataset_checksum: str = ""
    created_at: datetime
    code_version: str = __version__
    sweep_vary: Optional[str] = None
    sweep_value: Optional[float] = None

    @model_validator(mode="after")
    def validate_template(self):
        check_template(self.method, self.config.weights)
        return self

    def header_fields(self) -> Dict[str, str]:
        flat: Dict[str, Any] = {}
        _flatten("", self.model_dump(mode="json", exclude_none=True), flat)
        return {key: str(value) for key, value in flat.items()}

    def header_lines(self) -> List[str]:
        return header_lines(self.header_fields())

    @classmethod
    def from_header(cls, fields: Dict[str, str]) -> "RunManifest":
        return cls.model_validate(_unflatten(fields))


def header_lines(fields: Dict[str, str]) -> List[str]:
    return [f"# {key}={value}" for key, value in fields.items()]


def parse_header_line(line: str) -> Optional[Tuple[str, str]]:
    """``# key=value`` -> (key, value); None for anything else."""
    if not line.startswith("#"):
        return None
    key, sep, value = line[1:].strip().partition("=")
    if not sep or not key.strip():
        return None
    return key.strip(), value.strip()


MANIFEST_COMMENT = re.compile(r"<!-- manifest\n(.*?)-->", re.DOTALL)


def header_comment(fields: Dict[str, str]) -> str:
    """Manifest lines wrapped in a comment that markdown and SVG files can both carry."""
    # "--" may not appear inside an XML comment
    body = "".join(line.replace("--", "- -") + "\n" for line in header_lines(fields))
    return f"<!-- manifest\n{body}-->\n"


def read_header_comments(text: str) -> List[Dict[str, str]]:
    """Every manifest comment block of a markdown or SVG document, in order."""
    blocks = []
    for body in MANIFEST_COMMENT.findall(text):
        pairs = (parse_header_line(line) for line in body.splitlines())
        blocks.append(dict(pair for pair in pairs if pair is not None))
    return blocks


def read_header_file(path: PathLike) -> Dict[str, str]:
    """Leading ``# key=value`` lines of a CSV or manifest sidecar file."""
    fields: Dict[str, str] = {}
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            pair = parse_header_line(line.rstrip("\n"))
            if pair is None:
                break
            fields[pair[0]] = pair[1]
    return fields


def _flatten(prefix: str, value: Any, out: Dict[str, Any]) -> None:
    if isinstance(value, dict):
        for key, item in value.items():
            _flatten(f"{prefix}{key}.", item, out)
    elif isinstance(value, float):
        out[prefix[:-1]] = repr(value)
    else:
        out[prefix[:-1]] = value


def _unflatten(fields: Dict[str, str]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in fields.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def make_manifest(
    run_id: str,
    method: Method,
    config: TrainConfig,
    dataset: DomainDataset,
    n_seeds: int,
    reproducible: bool = False,
    sweep_vary: Optional[str] = None,
    sweep_value: Optional[float] = None,
) -> RunManifest:
    return RunManifest(
        run_id=run_id,
        method=method,
        config=config,
        n_seeds=n_seeds,
        dataset_spec=spec_from_meta(dataset.meta),
        dataset_checksum=dataset.checksum,
        created_at=EPOCH_ZERO if reproducible else datetime.now(timezone.utc).replace(microsecond=0),
        sweep_vary=sweep_vary,
        sweep_value=sweep_value,
    )


# ----------------------------------------------------------------------
# configuration precedence
# ----------------------------------------------------------------------
CONFIG_KEYS = (
    "method",
    "epochs",
    "batch_size_source",
    "batch_size_target",
    "learning_rate",
    "momentum",
    "lambda_p",
    "lambda_c",
    "lambda_e",
    "seed",
    "eval_every",
    "seeds",
    "jobs",
    "strict",
)


def load_config_file(path: PathLike) -> Dict[str, str]:
    """Parse a UTF-8 ``key = value`` file; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            logger.error(f"Unknown config key {key!r} in {path}")
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    logger.debug(f"Loaded config file {path}: {values}")
    return values


def resolve_options(cli: Dict[str, Any], file_values: Dict[str, Any]) -> Dict[str, Any]:
    """CLI values that were actually given win over file values; None means 'not given'."""
    merged = dict(file_values)
    merged.update({k: v for k, v in cli.items() if v is not None})
    return merged


class RunPlan(BaseModel):
    method: Method
    config: TrainConfig
    n_seeds: int = Field(3, ge=1)
    jobs: int = Field(1, ge=1)


def build_plan(options: Dict[str, Any], default_jobs: int = 1) -> RunPlan:
    """
    Turn merged options into a validated method, TrainConfig and seed count.

    Without an explicit ``jobs`` the worker count is ``default_jobs`` capped by the number of seeds.
    """
    method = Method(options.get("method", Method.FULL.value))
    weights = weights_for_method(method, **{k: options.get(k) for k in WEIGHT_NAMES})
    config_fields = {
        k: options[k]
        for k in ("epochs", "batch_size_source", "batch_size_target", "learning_rate", "momentum", "seed", "eval_every", "strict")
        if k in options and options[k] is not None
    }
    config = TrainConfig(weights=weights, **config_fields)
    n_seeds = int(options.get("seeds") or 3)
    jobs = options.get("jobs") or max(1, min(default_jobs, n_seeds))
    return RunPlan(method=method, config=config, n_seeds=n_seeds, jobs=jobs)


# ----------------------------------------------------------------------
# metrics CSV
# ----------------------------------------------------------------------
def record_row(record: MetricsRecord) -> List[str]:
    row = []
    for column in CSV_COLUMNS:
        value = getattr(record, _COLUMN_FIELDS.get(column, column))
        row.append(format_float(value) if isinstance(value, float) else str(value))
    return row


class MetricsSink:
    """Append-only metrics CSV; appends from several threads are serialized."""

    def __init__(self, path: PathLike, manifest: RunManifest):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", encoding="utf-8", newline="") as handle:
            handle.write("".join(line + "\n" for line in manifest.header_lines()))
            csv.writer(handle, lineterminator="\n").writerow(CSV_COLUMNS)

    def append(self, records: Iterable[MetricsRecord]) -> None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        for record in records:
            writer.writerow(record_row(record))
        with self._lock, self.path.open("a", encoding="utf-8", newline="") as handle:
            handle.write(buffer.getvalue())


def read_metrics_csv(path: PathLike) -> Tuple[Dict[str, str], List[MetricsRecord]]:
    """
    Read a metrics CSV back into its manifest fields and records.

    Raises ReportFormatError with the 1-based line number of the first bad line.
    """
    manifest: Dict[str, str] = {}
    records: List[MetricsRecord] = []
    header: Optional[List[str]] = None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if not sep:
                raise ReportFormatError(str(path), lineno, "comment line is not key=value")
            manifest[key.strip()] = value.strip()
            continue
        cells = next(csv.reader([line]))
        if header is None:
            if tuple(cells) != CSV_COLUMNS:
                raise ReportFormatError(str(path), lineno, "unexpected header row")
            header = cells
            continue
        if len(cells) != len(CSV_COLUMNS):
            logger.error(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} cells, got {len(cells)}")
            raise ReportFormatError(str(path), lineno, f"expected {len(CSV_COLUMNS)} cells, got {len(cells)}")
        try:
            values = {_COLUMN_FIELDS.get(col, col): cell for col, cell in zip(CSV_COLUMNS, cells)}
            records.append(MetricsRecord.model_validate(values))
        except ValueError as exc:
            raise ReportFormatError(str(path), lineno, f"bad value: {exc}") from exc
    if header is None:
        raise ReportFormatError(str(path), max(1, len(text.splitlines())), "missing header row")
    return manifest, records


# ----------------------------------------------------------------------
# train / ablate / export
# ----------------------------------------------------------------------
def execute_train(
    plan: RunPlan,
    dataset: DomainDataset,
    out_dir: PathLike,
    run_id: Optional[str] = None,
    reproducible: bool = False,
) -> Tuple[ExperimentSummary, Path]:
    """Train ``plan.n_seeds`` seeds, write the metrics CSV and one checkpoint per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = run_id or plan.method.value
    config = plan.config.model_copy(update={"record_wall_time": not reproducible})
    manifest = make_manifest(run_id, plan.method, config, dataset, plan.n_seeds, reproducible)
    results = run_tasks(seed_tasks(run_id, config, plan.n_seeds), dataset, plan.jobs)
    csv_path = out / f"{run_id}.csv"
    sink = MetricsSink(csv_path, manifest)
    for result in results:
        sink.append(result.records)
        _save_state(result, dataset.image_size, out / f"{run_id}_seed{result.seed}.ckpt", manifest)
    summary = summarize(run_id, results)
    logger.info(f"Wrote {csv_path}")
    return summary, csv_path


def manifest_path(checkpoint: PathLike) -> Path:
    """``runs/full_seed0.ckpt`` -> ``runs/full_seed0.manifest``."""
    return Path(checkpoint).with_suffix(".manifest")


def _save_state(result: RunResult, image_size: int, path: Path, manifest: RunManifest) -> None:
    net = MultiHeadNet.from_state(arch_from_state(result.state, image_size), result.state)
    save_checkpoint(net, path)
    seed_config = manifest.config.model_copy(update={"seed": result.seed})
    seed_manifest = manifest.model_copy(update={"config": seed_config, "n_seeds": 1})
    manifest_path(path).write_text("".join(line + "\n" for line in seed_manifest.header_lines()), encoding="utf-8")


def summary_line(method: Method, summary: ExperimentSummary) -> str:
    return f"{method.value}, {100 * summary.mean_accuracy:.2f} ± {100 * summary.std_accuracy:.2f}"


class SweepSpec(BaseModel):
    vary: Literal["lambda_c", "lambda_p", "lambda_e"]
    values: List[float]
    fixed: LossWeights = Field(default_factory=LossWeights)
    n_seeds: int = Field(3, ge=1)

    @field_validator("values")
    def validate_values(cls, value):
        if not value:
            raise ValueError("values must not be empty")
        if any(v < 0 for v in value):
            raise ValueError("values must be non-negative")
        return value

    def weights_for(self, value: float) -> LossWeights:
        return self.fixed.model_copy(update={self.vary: float(value)})


class AblationResult(BaseModel):
    sweep: SweepSpec
    manifest: RunManifest
    summaries: List[ExperimentSummary]
    csv_paths: List[str]


def sweep_run_id(vary: str, value: float) -> str:
    return f"{vary}={format_float(value)}"


def execute_ablation(
    sweep: SweepSpec,
    base: TrainConfig,
    dataset: DomainDataset,
    out_dir: PathLike,
    jobs: int = 1,
    reproducible: bool = False,
) -> AblationResult:
    """
    Run every sweep value for ``sweep.n_seeds`` seeds (method ``full``).

    All value×seed trainings share one worker pool; each value gets its own
    metrics CSV carrying the sweep variable and value in its manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = base.model_copy(update={"record_wall_time": not reproducible})
    tasks: List[RunTask] = []
    configs = []
    for value in sweep.values:
        config = base.model_copy(update={"weights": sweep.weights_for(value)})
        configs.append(config)
        tasks.extend(seed_tasks(sweep_run_id(sweep.vary, value), config, sweep.n_seeds))
    logger.info(f"Ablation over {sweep.vary} with {len(sweep.values)} values × {sweep.n_seeds} seeds")
    results = run_tasks(tasks, dataset, jobs)

    summaries: List[ExperimentSummary] = []
    csv_paths: List[str] = []
    for i, value in enumerate(sweep.values):
        run_id = sweep_run_id(sweep.vary, value)
        chunk = results[i * sweep.n_seeds:(i + 1) * sweep.n_seeds]
        manifest = make_manifest(
            run_id, Method.FULL, configs[i], dataset, sweep.n_seeds, reproducible, sweep.vary, float(value)
        )
        path = out / f"ablate_{sweep.vary}_{format_float(value)}.csv"
        sink = MetricsSink(path, manifest)
        for result in chunk:
            sink.append(result.records)
        summaries.append(summarize(run_id, chunk))
        csv_paths.append(str(path))
    shared = make_manifest(
        f"ablate_{sweep.vary}",
        Method.FULL,
        base.model_copy(update={"weights": sweep.fixed}),
        dataset,
        sweep.n_seeds,
        reproducible,
        sweep.vary,
    )
    return AblationResult(sweep=sweep, manifest=shared, summaries=summaries, csv_paths=csv_paths)


def ablation_table(vary: str, values: Sequence[float], means: Sequence[float], stds: Sequence[float]) -> str:
    """Markdown table with a value header, an ``Avg.`` row and a ``std`` row (percent)."""
    header = [vary] + [format_float(v) for v in values]
    avg = ["Avg."] + [f"{100 * m:.2f}" for m in means]
    std = ["std"] + [f"{100 * s:.2f}" for s in stds]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
        "| " + " | ".join(avg) + " |",
        "| " + " | ".join(std) + " |",
    ]
    return "\n".join(lines) + "\n"


def ablation_markdown(result: AblationResult) -> str:
    means = [s.mean_accuracy for s in result.summaries]
    stds = [s.std_accuracy for s in result.summaries]
    return ablation_table(result.sweep.vary, result.sweep.values, means, stds)


def write_ablation_summary(result: AblationResult, out_dir: PathLike) -> Tuple[Path, Path]:
    """Write ``ablate_<var>.md`` and ``ablate_<var>_summary.csv``, both led by the sweep's shared manifest."""
    out = Path(out_dir)
    fields = result.manifest.header_fields()
    table_path = out / f"ablate_{result.sweep.vary}.md"
    table_path.write_text(header_comment(fields) + ablation_markdown(result), encoding="utf-8")
    csv_path = out / f"ablate_{result.sweep.vary}_summary.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as handle:
        handle.write("".join(line + "\n" for line in header_lines(fields)))
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([result.sweep.vary, "mean_target_acc", "std_target_acc"])
        for value, summary in zip(result.sweep.values, result.summaries):
            writer.writerow([format_float(value), format_float(summary.mean_accuracy), format_float(summary.std_accuracy)])
    return table_path, csv_path


def feature_header(checkpoint: PathLike, dataset: DomainDataset) -> Dict[str, str]:
    """
    Manifest fields for a feature export.

    The training manifest comes from the checkpoint's sidecar; dataset fields
    are replaced by those of the dataset the features are computed on. A
    checkpoint without a sidecar only records its file name and the dataset.
    """
    sidecar = manifest_path(checkpoint)
    if not sidecar.exists():
        logger.warning(f"No manifest next to {checkpoint}; feature file records the dataset only")
        return {"checkpoint": Path(checkpoint).name, "dataset_checksum": dataset.checksum}
    manifest = RunManifest.from_header(read_header_file(sidecar))
    manifest = manifest.model_copy(update={"dataset_spec": spec_from_meta(dataset.meta), "dataset_checksum": dataset.checksum})
    return manifest.header_fields()


def export_features(
    net: MultiHeadNet,
    dataset: DomainDataset,
    path: PathLike,
    limit: Optional[int] = None,
    header: Optional[Dict[str, str]] = None,
) -> int:
    """
    Write encoder features of source and target examples to CSV.

    Columns: ``id, domain, label, f0 .. f{feature_dim-1}``, after the
    ``# key=value`` lines of ``header``. Target rows carry their evaluation
    labels; the file is for offline inspection only.
    """
    rows = [("source", ex) for ex in dataset.source] + [("target", ex) for ex in dataset.target_eval]
    if limit is not None:
        rows = rows[:limit]
    images = stack_images([ex for _, ex in rows])
    expected = (net.arch.in_channels, net.arch.image_size, net.arch.image_size)
    if rows and images.shape[1:] != expected:
        raise ShapeError("export_features", images.shape[1:], expected)
    with ad.no_grad():
        features = np.concatenate([encode(net, images[s:s + 500]).data for s in range(0, len(rows), 500)]) if rows else np.empty((0, net.feature_dim))
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        handle.write("".join(line + "\n" for line in header_lines(header or {})))
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["id", "domain", "label"] + [f"f{i}" for i in range(net.feature_dim)])
        for i, ((domain, ex), feats) in enumerate(zip(rows, features)):
            writer.writerow([i, domain, "" if ex.label is None else ex.label] + [format_float(v) for v in feats])
    logger.info(f"Exported {len(rows)} feature rows to {path}")
    return len(rows)
