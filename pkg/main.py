# main.py

import functools
import glob
import logging
import logging.handlers
import os
from pathlib import Path

import click
from pydantic import ValidationError

from app.datagen import DatasetSpec, DomainDataset, DomainShift, load_dataset, save_dataset
from app.errors import NumericalError
from app.experiments import (
    SweepSpec,
    ablation_markdown,
    build_plan,
    execute_ablation,
    execute_train,
    export_features,
    feature_header,
    load_config_file,
    resolve_options,
    summary_line,
    weights_for_method,
    write_ablation_summary,
)
from app.network import load_net
from app.reporting import load_runs, render_sweep_svg, sweep_points, write_report

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def setup_logging(level: str = "INFO", log_dir: str = "logs") -> None:
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),
            logging.handlers.RotatingFileHandler(os.path.join(log_dir, 'app.log'), maxBytes=10*1024*1024, backupCount=5)
        ]
    )


def _validation_message(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(part) for part in err['loc']) or 'value'}: {err['msg']}" for err in exc.errors())


def handle_errors(command):
    """Map domain exceptions onto exit codes: 2 validation, 3 IO, 4 numerical."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except NumericalError as e:
            logger.error(f"NumericalError in {command.__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            raise SystemExit(EXIT_NUMERICAL)
        except ValidationError as e:
            message = _validation_message(e)
            logger.error(f"ValidationError in {command.__name__}: {message}")
            click.echo(f"error: {message}", err=True)
            raise SystemExit(EXIT_VALIDATION)
        except ValueError as e:
            logger.error(f"ValueError in {command.__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            raise SystemExit(EXIT_VALIDATION)
        except OSError as e:
            logger.error(f"IO error in {command.__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            raise SystemExit(EXIT_IO)

    return wrapper


def training_options(command):
    """Flags shared by ``train`` and ``ablate``; unset flags stay None so config files can fill them."""
    options = [
        click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False), help="Dataset directory"),
        click.option("--out", "out_dir", default="runs", show_default=True, type=click.Path(file_okay=False)),
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key = value config file"),
        click.option("--epochs", type=int),
        click.option("--batch-size-source", type=int),
        click.option("--batch-size-target", type=int),
        click.option("--lr", "learning_rate", type=float),
        click.option("--momentum", type=float),
        click.option("--lambda-p", type=float),
        click.option("--lambda-c", type=float),
        click.option("--lambda-e", type=float),
        click.option("--seed", type=int, help="First seed; further seeds count up from it"),
        click.option("--seeds", type=int, help="Number of seeds [default: 3]"),
        click.option("--eval-every", type=int),
        click.option("--jobs", type=int, help="Worker processes [default: CPU count, capped by runs]"),
        click.option("--strict/--no-strict", default=None, help="Fail on non-finite values [default: strict]"),
        click.option("--reproducible", is_flag=True, help="Zero wall times and pin timestamps for byte-identical output"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _merged_options(config_path, cli_values):
    file_values = load_config_file(config_path) if config_path else {}
    options = resolve_options(cli_values, file_values)
    logger.debug(f"Resolved options: {options}")
    return options


@click.group()
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--log-dir", default="logs", show_default=True, type=click.Path(file_okay=False))
def cli(log_level, log_dir):
    """Self-supervised domain adaptation experiments on synthetic shifted shapes."""
    setup_logging(log_level, log_dir)


@cli.command("gen-data")
@click.option("--classes", "n_classes", default=5, show_default=True, type=int)
@click.option("--n", "n_source", default=2000, show_default=True, type=int, help="Labeled source examples")
@click.option("--n-target", type=int, help="Unlabeled target examples [default: --n]")
@click.option("--size", "image_size", default=32, show_default=True, type=int)
@click.option("--shift", default=0.6, show_default=True, type=float, help="Domain shift strength in [0, 1]")
@click.option("--styles", "n_source_styles", default=1, show_default=True, type=int, help="Source background styles")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@handle_errors
def gen_data(n_classes, n_source, n_target, image_size, shift, n_source_styles, seed, out_dir):
    """Generate a source/target dataset and write it as IDX files."""
    logger.info(f"gen-data: K={n_classes} n={n_source} shift={shift} seed={seed} -> {out_dir}")
    spec = DatasetSpec(
        n_source=n_source,
        n_target=n_target if n_target is not None else n_source,
        n_classes=n_classes,
        image_size=image_size,
        domain_shift=DomainShift.from_strength(shift),
        seed=seed,
        n_source_styles=n_source_styles,
    )
    checksum = save_dataset(DomainDataset.from_spec(spec), out_dir)
    click.echo(checksum)


@cli.command()
@training_options
@click.option("--method", type=click.Choice(["source_only", "rot", "rot_entmin", "full"]), help="[default: full]")
@click.option("--run-id", help="Name of the run [default: the method]")
@handle_errors
def train(data_dir, out_dir, config_path, reproducible, run_id, **cli_values):
    """Train one method for several seeds and print 'method, mean ± std'."""
    options = _merged_options(config_path, cli_values)
    plan = build_plan(options, default_jobs=os.cpu_count() or 1)
    dataset = load_dataset(data_dir)
    summary, csv_path = execute_train(plan, dataset, out_dir, run_id=run_id, reproducible=reproducible)
    logger.info(f"Metrics written to {csv_path}")
    click.echo(summary_line(plan.method, summary))


def _parse_values(ctx, param, value):
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}")


@cli.command()
@training_options
@click.option("--vary", required=True, type=click.Choice(["lambda_c", "lambda_p", "lambda_e"]))
@click.option("--values", required=True, callback=_parse_values, help="Comma-separated weights, e.g. 0,0.1,0.2")
@handle_errors
def ablate(data_dir, out_dir, config_path, reproducible, vary, values, **cli_values):
    """Sweep one loss weight of the full method; print the Avg./std table."""
    options = _merged_options(config_path, cli_values)
    options.pop("method", None)
    fixed = weights_for_method("full", **{k: options.get(k) for k in ("lambda_p", "lambda_c", "lambda_e")})
    plan = build_plan(options, default_jobs=os.cpu_count() or 1)
    sweep = SweepSpec(vary=vary, values=values, fixed=fixed, n_seeds=plan.n_seeds)
    jobs = options.get("jobs") or max(1, min(os.cpu_count() or 1, len(sweep.values) * sweep.n_seeds))
    dataset = load_dataset(data_dir)
    result = execute_ablation(sweep, plan.config, dataset, out_dir, jobs=int(jobs), reproducible=reproducible)
    write_ablation_summary(result, out_dir)
    runs = load_runs(result.csv_paths)
    svg = render_sweep_svg(vary, sweep_points(runs)[vary], [run.manifest for run in runs])
    Path(out_dir, f"ablate_{vary}.svg").write_text(svg, encoding="utf-8")
    click.echo(ablation_markdown(result), nl=False)


@cli.command()
@click.argument("runs", nargs=-1)
@click.option("--out", "out_dir", default="report", show_default=True, type=click.Path(file_okay=False))
@handle_errors
def report(runs, out_dir):
    """Render convergence and sweep charts plus a markdown summary from metrics CSVs."""
    paths = sorted({p for pattern in runs for p in (glob.glob(pattern) or ([pattern] if os.path.isfile(pattern) else []))})
    logger.debug(f"report: {len(paths)} CSV files from {list(runs)}")
    for path in write_report(paths, out_dir):
        click.echo(str(path))


@cli.command("export-features")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--limit", type=int, help="Export only the first N rows (source rows first)")
@handle_errors
def export_features_cmd(checkpoint, data_dir, out_path, limit):
    """Write encoder features of source and target examples to CSV."""
    dataset = load_dataset(data_dir)
    net = load_net(checkpoint, dataset.image_size)
    count = export_features(net, dataset, out_path, limit=limit, header=feature_header(checkpoint, dataset))
    click.echo(f"{count} rows -> {out_path}")


if __name__ == "__main__":
    cli()
