#!/usr/bin/env python3
"""
PHP experiment runner

Ties dataset generation, incremental training, single-task baselines,
ablations and reporting together. Every command writes a run manifest
(config, seeds, code version, fingerprints) into the output directory.
"""

import argparse
import copy
import logging
import os
import platform
import sys
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from ..errors import PHPError, ValidationError, TaskLookupError
from ..tasks.synthetic_av_tasks import (
    TaskSpec, make_task, save_task_dataset, read_dataset_manifest, load_task_dataset,
)
from ..model.frozen_dual_encoder import init_frozen
from ..engine.config import (
    COMPONENTS, PlacementConfig, all_placements, all_component_masks, load_experiment_config,
    order_label, order_slug,
)
from ..engine.incremental_engine import IncrementalEngine, SequenceResult, single_task_baseline
from ..analysis.metrics_reports import compute_metrics, write_report, ablation_frame
from ..analysis.plots import plot_all
from ..utils import dump_json, load_json, round_half_up

logger = logging.getLogger(__name__)

COMMANDS = ("generate", "run", "report", "ablate", "baseline")
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
LOCK_NAME = ".php.lock"
LOG_NAME = "php_experiment.log"


def setup_logging(output_dir, verbose=False):
    """Log to php_experiment.log in the output directory and to the console"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(Path(output_dir) / LOG_NAME),
            logging.StreamHandler()
        ],
        force=True,
    )


def prepare_output_dir(output_dir):
    output_dir = Path(output_dir)
    if not output_dir.parent.exists():
        raise ValidationError(f"Parent of output directory does not exist: {output_dir.parent}")
    try:
        output_dir.mkdir(exist_ok=True)
    except OSError as e:
        raise PHPError(f"Cannot create output directory {output_dir}: {e}")
    return output_dir


@contextmanager
def output_lock(output_dir):
    """Exclusive writer lock on an output directory"""
    path = Path(output_dir) / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PHPError(f"{path} exists: another run is writing to {output_dir} (delete the file if it is stale)")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def write_run_manifest(output_dir, command, config, fingerprints=None, extra=None):
    manifest = {
        "command": command,
        "code_version": __version__,
        "timestamp": datetime.now().isoformat(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "config": config.to_dict(),
        "seeds": {
            "experiment": config.seed,
            "encoder": config.encoder.seed,
            "train": config.train.seed,
            "tasks": {t.task_id: t.seed for t in config.tasks},
        },
        "fingerprints": fingerprints or {},
    }
    if extra:
        manifest.update(extra)
    path = Path(output_dir) / "manifests" / f"{command}.json"
    path.parent.mkdir(exist_ok=True)
    dump_json(manifest, path)
    return path


def _model_fingerprints(config):
    encoders = init_frozen(config.encoder, config.tasks[0].base_channels)
    return {"backbone": encoders.fingerprint()}


# ---------------------------------------------------------------------------
# commands

def cmd_generate(config, output_dir):
    """Materialize every task's dataset; tasks already on disk with the same fingerprint are skipped"""
    datasets_dir = Path(output_dir) / "datasets"
    fingerprints = {}
    for spec in config.tasks:
        task_dir = datasets_dir / spec.task_id
        dataset = make_task(spec)
        fp = dataset.fingerprint()
        manifest = read_dataset_manifest(task_dir)
        if (manifest is not None and manifest.get("fingerprint") == fp
                and TaskSpec.from_dict(manifest["task_spec"]) == spec):
            logger.info(f"✅ {spec.task_id}: up to date ({fp[:12]})")
        else:
            try:
                save_task_dataset(dataset, task_dir)
            except OSError as e:
                raise PHPError(f"Cannot write dataset {spec.task_id} to {task_dir}: {e}")
            logger.info(f"💾 {spec.task_id}: {spec.flavor}, {spec.num_classes} classes -> {task_dir}")
        fingerprints[spec.task_id] = fp
    return fingerprints


def load_datasets(config, output_dir):
    datasets = {}
    for spec in config.tasks:
        task_dir = Path(output_dir) / "datasets" / spec.task_id
        dataset = load_task_dataset(task_dir)
        if dataset.spec != spec:
            raise ValidationError(f"Dataset in {task_dir} was generated for a different {spec.task_id} spec; "
                                  f"rerun 'generate'")
        datasets[spec.task_id] = dataset
    return datasets


def cmd_run(config, output_dir, datasets=None):
    output_dir = Path(output_dir)
    datasets = datasets if datasets is not None else load_datasets(config, output_dir)
    engine = IncrementalEngine(config, datasets)
    results = []
    for n, order in enumerate(config.orders, 1):
        label = order_label(order)
        logger.info(f"🚀 [{n}/{len(config.orders)}] {label}")
        engine.checkpoint_dir = output_dir / "checkpoints" / order_slug(order)
        result = engine.run_sequence(order)
        dump_json(result.to_dict(), output_dir / "results" / f"{order_slug(order)}.json")
        results.append(result)
    logger.info(f"✅ {len(results)} orders written to {output_dir / 'results'}")
    return results


def load_results(results_dir):
    results_dir = Path(results_dir)
    files = sorted(results_dir.glob("*.json")) if results_dir.is_dir() else []
    if not files:
        raise ValidationError(f"No result files in {results_dir}")
    return [SequenceResult.from_dict(load_json(f)) for f in files]


def load_singles(output_dir):
    path = Path(output_dir) / "baselines.json"
    return load_json(path) if path.exists() else None


def cmd_report(results_dir, output_dir, singles=None, label="PHP"):
    results = load_results(results_dir)
    report_dir = Path(output_dir) / "report"
    table = write_report(results, report_dir, singles=singles, label=label)
    plot_all(results, report_dir / "plots")
    agg = table.aggregates
    logger.info(f"📊 A_mean {agg['A_mean']:.2f}  A_final {agg['A_final']:.2f}  F_mean {agg['F_mean']:.2f}  "
                f"Diff {agg['Diff']:.2f}")
    return table


def _ablation_rows(variants, datasets, results_dir):
    rows = []
    for number, (markers, variant) in enumerate(variants, 1):
        variant.validate()
        logger.info(f"🧪 Row {number}: {markers}")
        engine = IncrementalEngine(variant, datasets)
        results = [engine.run_sequence(order) for order in variant.orders]
        for result in results:
            dump_json(result.to_dict(), results_dir / f"row{number}" / f"{result.slug}.json")
        rows.append((number, markers, compute_metrics(results, label=f"Row {number}")))
    return rows


def _write_ablation(rows, path):
    frame = ablation_frame(rows)
    numeric = [c for c in frame.columns if c.startswith("mean.") or c == "Diff"]
    frame[numeric] = frame[numeric].apply(lambda col: col.map(lambda v: round_half_up(v) if np.isfinite(v) else v))
    frame.to_csv(path, index=False, float_format="%.2f")
    logger.info(f"📋 {len(rows)} ablation rows -> {path}")
    return frame


def cmd_ablate(config, output_dir, mode="both", datasets=None):
    """Component-mask rows (empty mask first, full mask last) and/or the six placement rows"""
    if mode not in ("components", "placement", "both"):
        raise ValidationError(f"Unknown ablation mode '{mode}'")
    output_dir = Path(output_dir)
    datasets = datasets if datasets is not None else load_datasets(config, output_dir)
    ablation_dir = output_dir / "ablation"
    ablation_dir.mkdir(exist_ok=True)
    frames = {}

    if mode in ("components", "both"):
        variants = []
        for mask in all_component_masks():
            variant = copy.deepcopy(config)
            variant.train.enabled_components = list(mask)
            variants.append(({c: int(c in mask) for c in COMPONENTS}, variant))
        rows = _ablation_rows(variants, datasets, ablation_dir / "components")
        frames["components"] = _write_ablation(rows, ablation_dir / "components.csv")

    if mode in ("placement", "both"):
        variants = []
        for placement in all_placements():
            variant = copy.deepcopy(config)
            variant.placement = placement
            variants.append((dict(placement.assignment), variant))
        rows = _ablation_rows(variants, datasets, ablation_dir / "placement")
        frames["placement"] = _write_ablation(rows, ablation_dir / "placement.csv")
    return frames


def cmd_baseline(config, output_dir, task_ids=None, datasets=None):
    """Single-task accuracy per task; saved as baselines.json and used as A_single by report"""
    output_dir = Path(output_dir)
    datasets = datasets if datasets is not None else load_datasets(config, output_dir)
    singles = {}
    for task_id in task_ids or config.task_ids:
        singles[task_id] = single_task_baseline(task_id, config, datasets)
        logger.info(f"🎯 {task_id} single-task accuracy {singles[task_id]:.2f}%")
    dump_json(singles, output_dir / "baselines.json")
    return singles


# ---------------------------------------------------------------------------
# entry point

def _parse_orders(values):
    return [[t.strip() for t in v.replace("->", ",").split(",") if t.strip()] for v in values]


def _parse_components(value):
    if value.strip().lower() in ("", "none"):
        return []
    return [c.strip().upper() for c in value.split(",") if c.strip()]


def build_config(args, env=None):
    """Config file, then PHP_ environment overrides, then command-line flags"""
    config = load_experiment_config(args.config, env=env)
    if args.seed is not None:
        config = config.reseeded(args.seed)
    if args.orders:
        config.orders = _parse_orders(args.orders)
    if args.placement:
        config.placement = PlacementConfig.from_label(args.placement)
    if args.components is not None:
        config.train.enabled_components = _parse_components(args.components)
    if args.out:
        config.output_dir = args.out
    return config.validate()


def build_parser():
    parser = argparse.ArgumentParser(
        description='PHP audio-visual prompting experiments',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate the synthetic tasks
  python run_experiment.py generate --out ./php_output

  # Train every order of the default suite
  python run_experiment.py run --out ./php_output

  # One order only, with another seed
  python run_experiment.py run --orders AVE,AVVP,AVQA --seed 3

  # Single-task baselines, then the metric tables and plots
  python run_experiment.py baseline
  python run_experiment.py report

  # Component ablation and placement study
  python run_experiment.py ablate --mode components
  python run_experiment.py ablate --mode placement

  # Override any config field from the environment
  PHP_TRAIN__EPOCHS_PER_TASK=2 python run_experiment.py run
        """
    )
    parser.add_argument('command', choices=COMMANDS, help='What to do')
    parser.add_argument('--config', default=None,
                        help='Experiment config file (JSON or YAML); defaults to the desk-scale suite')
    parser.add_argument('--orders', action='append', default=None,
                        help='Task order such as AVE,AVVP,AVQA (repeat for several orders)')
    parser.add_argument('--seed', type=int, default=None,
                        help='Base seed; every other seed is derived from it')
    parser.add_argument('--placement', default=None,
                        help='Bands for TMA-TMDG-TMI, e.g. S-M-D')
    parser.add_argument('--components', default=None,
                        help='Enabled components, e.g. TMA,TMI or "none"')
    parser.add_argument('--out', default=None,
                        help='Output directory (default: config output_dir)')
    parser.add_argument('--results', default=None,
                        help='Results directory for report (default: <out>/results)')
    parser.add_argument('--mode', default='both', choices=('components', 'placement', 'both'),
                        help='Which ablation table to produce (default: both)')
    parser.add_argument('--tasks', default=None,
                        help='Comma-separated task ids for baseline (default: all)')
    parser.add_argument('--label', default='PHP',
                        help='Method name written into report rows')
    parser.add_argument('--verbose', '-v', action='store_true',
                        help='Debug logging (per-step losses)')
    return parser


def main(argv=None, env=None):
    """Run one command; returns the process exit code"""
    args = build_parser().parse_args(argv)
    try:
        config = build_config(args, env=env)
        output_dir = prepare_output_dir(config.output_dir)
        setup_logging(output_dir, args.verbose)
        logger.info(f"🔬 PHP experiments v{__version__}: {args.command}")
        logger.info(f"📁 Output: {output_dir}")

        with output_lock(output_dir):
            fingerprints = _model_fingerprints(config)
            extra = {}
            if args.command == "generate":
                fingerprints["datasets"] = cmd_generate(config, output_dir)
            elif args.command == "run":
                results = cmd_run(config, output_dir)
                extra["orders"] = [r.label for r in results]
            elif args.command == "report":
                results_dir = Path(args.results) if args.results else output_dir / "results"
                table = cmd_report(results_dir, output_dir, singles=load_singles(output_dir), label=args.label)
                extra["aggregates"] = table.aggregates
            elif args.command == "ablate":
                cmd_ablate(config, output_dir, mode=args.mode)
                extra["mode"] = args.mode
            elif args.command == "baseline":
                tasks = [t.strip() for t in args.tasks.split(",")] if args.tasks else None
                extra["baselines"] = cmd_baseline(config, output_dir, tasks)
            write_run_manifest(output_dir, args.command, config, fingerprints, extra)
        logger.info(f"✅ {args.command} complete. Check {output_dir} for results.")
        return EXIT_OK
    except (ValidationError, TaskLookupError) as e:
        logger.error(f"❌ {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        logger.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
