"""Command-line entry point: ``prunerobust <command>``."""
from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from .. import synth
from ..corrupt import KINDS, CorruptionSpec, corrupt_eval, read_png, write_png, write_severity_table
from ..detector import load_checkpoint, save_checkpoint
from .compare import ReportMismatchError, compare_files
from .config import ExperimentConfig
from .plots import ReportSchemaError, emit_plots
from .runner import Cell, ExperimentRunner


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  help="YAML experiment config; omitted fields take their defaults.")
    @click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")
    @click.option("--out-dir", type=click.Path(file_okay=False), default="out", show_default=True)
    @functools.wraps(fn)
    def wrapper(config_path, seed, out_dir, **kw):
        cfg = ExperimentConfig.load(config_path) if config_path else ExperimentConfig()
        if seed is not None:
            cfg.seed = seed
        return fn(cfg=cfg, out_dir=Path(out_dir), **kw)
    return wrapper


def _fail(msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Gradual pruning, corruption robustness and class imbalance experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@common_options
@click.option("--num-images", type=int, default=None)
@click.option("--image-size", type=int, default=None)
@click.option("--num-classes", type=int, default=None)
@click.option("--alpha", type=float, default=None, help="Power-law exponent of class frequencies.")
def gen_data(cfg, out_dir, num_images, image_size, num_classes, alpha):
    """Render a synthetic detection dataset into OUT_DIR."""
    for key, val in (("num_images", num_images), ("image_size", image_size),
                     ("num_classes", num_classes), ("alpha", alpha)):
        if val is not None:
            setattr(cfg.data, key, val)
    runner = ExperimentRunner(cfg.validate(), out_dir)
    spec = synth.DatasetSpec(
        num_images=cfg.data.num_images, image_size=cfg.data.image_size,
        num_classes=cfg.data.num_classes, alpha=cfg.data.alpha,
        objects_per_image=tuple(cfg.data.objects_per_image),
        object_size=tuple(cfg.data.object_size), color_consistency=cfg.data.color_consistency,
        seed=runner.seed("data"),
    )
    ds = synth.generate(spec, out_dir)
    click.echo(f"wrote {len(ds)} images and {len(ds.ground_truth.annotations)} boxes to {out_dir}")


def _cell_options(fn):
    fn = click.option("--data", "data_path", type=click.Path(exists=True, file_okay=False),
                      default=None, help="Dataset root (default: generate from the config).")(fn)
    fn = click.option("--pruning", type=click.Choice(["none", "structured", "unstructured"]),
                      default="none", show_default=True)(fn)
    fn = click.option("--rate", type=float, default=0.0, show_default=True)(fn)
    fn = click.option("--imbalance", type=click.Choice(["none", "rfs", "inv", "inv_cap", "ens"]),
                      default="none", show_default=True)(fn)
    fn = click.option("--lam", type=float, default=1.0, show_default=True)(fn)
    fn = click.option("--augment/--no-augment", default=False, show_default=True)(fn)
    fn = click.option("--repeat", type=int, default=0, show_default=True,
                      help="Repeat index; selects the derived training seed.")(fn)
    fn = click.option("--epochs", type=int, default=None)(fn)
    return fn


@main.command()
@common_options
@_cell_options
def train(cfg, out_dir, data_path, pruning, rate, imbalance, lam, augment, repeat, epochs):
    """Train one cell and write its checkpoint and pruning trace to OUT_DIR."""
    if data_path:
        cfg.data.path = data_path
    if epochs is not None:
        cfg.training.epochs = epochs
    rate = 0.0 if pruning == "none" else rate
    runner = ExperimentRunner(cfg.validate(), out_dir)
    cell = Cell(augment, imbalance, lam, pruning, rate, repeat)
    _, train_set, _ = runner.data()
    est = runner.make_estimator(cell, train_set)
    est.fit(train_set.images, train_set.targets(), train_set.image_ids)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(est, out_dir / "checkpoint.json")
    if est.pruner_ is not None:
        est.pruner_.write_trace(out_dir / "pruning_trace.csv")
    click.echo(f"{cell.cell_id}: final loss {est.history_[-1]['loss']:.4f}, "
               f"checkpoint {out_dir / 'checkpoint.json'}")


@main.command()
@common_options
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False),
              help="Directory of PNG images named <image_id>.png.")
@click.option("--kind", "kinds", multiple=True, type=click.Choice(KINDS),
              help="Corruption kind (repeatable; default all).")
@click.option("--severity", "severities", multiple=True, type=click.IntRange(1, 5),
              help="Severity 1-5 (repeatable; default 3).")
@click.option("--severity-table", is_flag=True, help="Only write the parameter table CSV.")
def corrupt(cfg, out_dir, input_dir, kinds, severities, severity_table):
    """Write corrupted copies of INPUT to OUT_DIR/<kind>/s<severity>/."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if severity_table:
        write_severity_table(out_dir / "severity_table.csv")
        click.echo(f"wrote {out_dir / 'severity_table.csv'}")
        return
    if not input_dir:
        _fail("--input is required unless --severity-table is given")
    paths = sorted(Path(input_dir).glob("*.png"), key=lambda p: (len(p.stem), p.stem))
    failures = 0
    for kind in kinds or KINDS:
        for sev in severities or (3,):
            dest = out_dir / kind / f"s{sev}"
            dest.mkdir(parents=True, exist_ok=True)
            for p in paths:
                try:
                    image_id = int(p.stem) if p.stem.isdigit() else 0
                    img = corrupt_eval(read_png(p), CorruptionSpec(kind, sev), cfg.seed, image_id)
                    write_png(dest / p.name, img)
                except Exception as exc:  # report and keep going
                    failures += 1
                    click.echo(f"{p.name} {kind} s{sev}: {exc}", err=True)
    click.echo(f"corrupted {len(paths)} images; {failures} failures")
    sys.exit(1 if failures else 0)


@main.command()
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, file_okay=False), default=None)
def evaluate(cfg, out_dir, checkpoint, data_path):
    """Score a checkpoint on the validation split under every configured condition."""
    if data_path:
        cfg.data.path = data_path
    runner = ExperimentRunner(cfg.validate(), out_dir)
    est = load_checkpoint(checkpoint)
    cond = {"model": Path(checkpoint).parent.name or "model", "augment": int(est.augment),
            "imbalance": "", "lambda": "", "pruning": est.pruning, "rate": est.sparsity,
            "repeat": ""}
    runner.evaluate_estimator(est, out_dir, cond)
    click.echo(f"wrote {out_dir / 'reports.csv'}")


@main.command()
@common_options
@click.option("--workers", type=int, default=None, help="Parallel cell processes.")
@click.option("--repeat", type=int, default=None, help="Repeats per cell (overrides the config).")
def run(cfg, out_dir, workers, repeat):
    """Run the full experiment matrix; exit code 0 only if every cell succeeds."""
    if workers is not None:
        cfg.workers = workers
    if repeat is not None:
        cfg.repeat = repeat
    ok = ExperimentRunner(cfg.validate(), out_dir).run()
    click.echo(f"{'all cells succeeded' if ok else 'some cells failed'}; merged report "
               f"{out_dir / 'merged.csv'}")
    sys.exit(0 if ok else 1)


@main.command()
@common_options
@click.option("--report", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--class-stats", type=click.Path(exists=True, dir_okay=False), default=None)
def plots(cfg, out_dir, report, class_stats):
    """Render SVG charts (plus their data CSVs) from a merged report."""
    try:
        made = emit_plots(report, out_dir, class_stats)
    except ReportSchemaError as exc:
        _fail(str(exc))
    for p in made:
        click.echo(str(p))


@main.command()
@common_options
@click.argument("report_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("report_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--where", multiple=True, help="Row filter COLUMN=VALUE (repeatable).")
def compare(cfg, out_dir, report_a, report_b, where):
    """Print per-class, mAP and worst-class AP deltas B - A."""
    filt = {}
    for w in where:
        if "=" not in w:
            _fail(f"--where expects COLUMN=VALUE, got {w!r}")
        k, v = w.split("=", 1)
        filt[k] = v
    try:
        rows = compare_files(report_a, report_b, filt)
    except ReportMismatchError as exc:
        _fail(str(exc))
    for r in rows:
        label = r["class_name"] if r["metric"] == "class" else r["metric"]
        click.echo(f"{label:<14} {r['a']:.3f} -> {r['b']:.3f} ({r['delta_str']})")


if __name__ == "__main__":
    main()
