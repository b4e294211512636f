"""Command-line entry points: synth, train-baseline, adapt, eval, report.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from .config import RunConfig, dump_config, load_config
from .detector import CheckpointError, TrainingError, load_checkpoint, save_checkpoint
from .heatmap import HeatmapError
from .metrics import EvaluationError, evaluate_model, write_metrics_csv
from .report import ReportError, emit_report
from .seeding import set_deterministic
from .selftrain import (
    ConfigError,
    ResumeError,
    check_dataset,
    evaluate_detector,
    load_run_config,
    run_adaptation,
    test_pairs,
    train_pool_detector,
)
from .synth import SPLITS, DataError, generate_dataset, has_shadow, load_dataset, save_dataset

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4
log = logging.getLogger("pseudoheat")


def _fail(code: int, msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            _fail(EXIT_CONFIG, str(e))
        except (DataError, HeatmapError, EvaluationError, CheckpointError, ResumeError, ReportError) as e:
            _fail(EXIT_DATA, str(e))
        except (TrainingError, RuntimeError, OSError) as e:
            _fail(EXIT_RUNTIME, str(e))

    return wrapper


def config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(), default=None, help="INI config file."),
        click.option("--profile", default="defaults", show_default=True, help="Section of the config file."),
        click.option("--seed", type=int, default=None, help="Global seed."),
        click.option("--deterministic/--no-deterministic", default=None, help="Deterministic torch kernels."),
        click.option("--out", type=click.Path(), default=None, help="Output directory."),
        click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override any config key."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def build_config(config_path, profile, sets, **flags) -> RunConfig:
    overrides = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    overrides.update({k: v for k, v in flags.items() if v is not None})
    cfg = load_config(config_path, profile, overrides)
    cfg.validate()
    return cfg


def _prepare(cfg: RunConfig) -> None:
    set_deterministic(cfg.deterministic)


def _require_dataset(cfg: RunConfig) -> Path:
    if not cfg.dataset:
        raise ConfigError("no dataset given (use --dataset or set dataset=...)")
    p = Path(cfg.dataset)
    if not (p / "manifest.txt").exists() and not p.is_file():
        raise ConfigError(f"{p}: dataset directory has no manifest.txt")
    return p


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress.")
def main(verbose: bool) -> None:
    """Self-training domain adaptation for point detection with pseudo-heatmaps."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")


@main.command()
@config_options
@handle_errors
def synth(config_path, profile, seed, deterministic, out, sets):
    """Generate and save the two-domain synthetic dataset."""
    cfg = build_config(config_path, profile, sets, seed=seed, deterministic=deterministic, out=out)
    ds = generate_dataset(cfg.domain("source"), cfg.domain("target"), cfg.counts(), cfg.sub_seed("data"),
                          (cfg.test_size, cfg.test_size))
    root = Path(cfg.out)
    save_dataset(ds, root)
    dump_config(cfg, root / "config.ini")
    for split in SPLITS:
        click.echo(f"{split}: {len(ds.manifest[split])}")


@main.command("train-baseline")
@click.option("--dataset", type=click.Path(), default=None)
@config_options
@handle_errors
def train_baseline(dataset, config_path, profile, seed, deterministic, out, sets):
    """Train the detector on labeled source only and evaluate both test splits."""
    cfg = build_config(config_path, profile, sets, dataset=dataset, seed=seed, deterministic=deterministic,
                       out=out)
    ds_path = _require_dataset(cfg)
    _prepare(cfg)
    ds = load_dataset(ds_path)
    check_dataset(ds)
    acfg = cfg.adaptation()
    detector = train_pool_detector(ds.split("labeled-source"), None, acfg, 0)
    reports = evaluate_detector(detector, ds, acfg)
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.ini")
    save_checkpoint(detector, root / "detector.ckpt")
    write_metrics_csv(reports, root / "metrics.csv", acfg.d_match, acfg.th_d)
    click.echo(f"f_source={reports['test-source'].f_score:.4f} f_target={reports['test-target'].f_score:.4f}")


@main.command()
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--iterations", type=int, default=None, help="Number of self-training iterations.")
@click.option("--resume", is_flag=True, help="Continue from the last complete iteration in --out.")
@click.option("--stop-after", type=int, default=None, hidden=True)
@config_options
@handle_errors
def adapt(dataset, iterations, resume, stop_after, config_path, profile, seed, deterministic, out, sets):
    """Run the iterative pseudo-labeling adaptation."""
    root = Path(out) if out else None
    if resume and root is not None and (root / "config.ini").exists() and config_path is None:
        config_path, profile = root / "config.ini", "effective"
    cfg = build_config(config_path, profile, sets, dataset=dataset, iterations=iterations, seed=seed,
                       deterministic=deterministic, out=out)
    ds_path = _require_dataset(cfg)
    _prepare(cfg)
    ds = load_dataset(ds_path)
    acfg = cfg.adaptation()
    check_dataset(ds)
    root = Path(cfg.out)
    if resume:
        stored, _ = load_run_config(root)
        if stored.to_dict() != acfg.to_dict():
            raise ConfigError(f"{root}: resume config differs from the one the run started with")
    elif (root / "report.csv").exists():
        raise ConfigError(f"{root}: run directory already holds a run (use --resume or a new --out)")
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.ini")
    rep = run_adaptation(ds, acfg, root, resume_run=resume, stop_after=stop_after,
                         dataset_path=str(Path(ds_path).resolve()))
    for row in rep.rows:
        click.echo(f"iter {row['iteration']}: f_source={row['f_source']:.4f} f_target={row['f_target']:.4f} "
                   f"selected={row['n_selected']}")
    if rep.final is not None:
        click.echo(f"final: f_source={rep.final['f_source']:.4f} f_target={rep.final['f_target']:.4f}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--split", "splits", multiple=True, type=click.Choice(["test-source", "test-target"]),
              help="Split(s) to evaluate; default both.")
@click.option("--d-match", type=float, default=None)
@click.option("--th-d", type=float, default=None)
@click.option("--force", is_flag=True, help="Load the checkpoint even if its config hash disagrees.")
@config_options
@handle_errors
def eval_cmd(checkpoint, dataset, splits, d_match, th_d, force, config_path, profile, seed, deterministic,
             out, sets):
    """Evaluate a detector checkpoint on test splits."""
    cfg = build_config(config_path, profile, sets, dataset=dataset, d_match=d_match, th_d=th_d, seed=seed,
                       deterministic=deterministic, out=out)
    ds_path = _require_dataset(cfg)
    _prepare(cfg)
    if not has_shadow(ds_path):
        raise EvaluationError(f"{ds_path}: evaluation ground truth (shadow/annotations.csv) is missing")
    detector = load_checkpoint(checkpoint, force=force)
    ds = load_dataset(ds_path)
    reports = {}
    for split in splits or ("test-source", "test-target"):
        reports[split] = evaluate_model(detector, test_pairs(ds, split), cfg.d_match, cfg.th_d)
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(reports, root / "eval_metrics.csv", cfg.d_match, cfg.th_d)
    for split, r in reports.items():
        click.echo(f"{split}: tp={r.tp} fp={r.fp} fn={r.fn} P={r.precision:.4f} R={r.recall:.4f} "
                   f"F={r.f_score:.4f}")


@main.command()
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@handle_errors
def report(run_dir, dataset, out):
    """Emit tables and plots for a finished run."""
    ds = load_dataset(dataset) if dataset else None
    written = emit_report(run_dir, out, ds)
    for name, path in written.items():
        click.echo(f"{name}: {path}")


if __name__ == "__main__":
    main()
