"""
Command-line interface for opsat
Prepares corpora, generates synthetic data, trains models and reports results
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

# Add the tools directory to the path so we can import our modules
sys.path.insert(0, str(Path(__file__).parent))

from config import config
from dataset import validate_tables
from formatters import (
    format_json_report,
    format_metrics_report,
    format_percent,
    format_sig,
    format_table,
    format_validation_result,
)
from runner import (
    ExperimentConfig,
    MatrixConfig,
    derive_seeds,
    emit_report,
    find_runs,
    load_run,
    met_table_from_grid,
    prepare_corpus,
    pretrain_backbone,
    pretrained_path,
    run_experiment,
    run_matrix,
    write_corpus_report,
)
from synthgen import load_synth_config, write_corpus
from weights_archive import convert_checkpoint


def _out_dir(args) -> Path:
    return Path(args.out or config.OUT_DIR)


def _require_config(args) -> Path:
    if not args.config:
        raise ValueError(f"'{args.command}' needs --config <file>")
    return Path(args.config)


def _experiment(args) -> ExperimentConfig:
    experiment = ExperimentConfig.from_file(_require_config(args))
    if args.seed is not None:
        experiment = dataclasses.replace(experiment, seed=args.seed)
    return experiment


def _print_run(run) -> None:
    print(f"✅ Run complete: {run.run_dir}")
    print(f"🔑 Config hash: {run.config_hash}")
    for report in run.metrics:
        print(f"  {format_metrics_report(report.to_dict())}")
    for interval in run.bootstrap:
        print(f"  {interval.metric} 95% CI: [{format_sig(interval.lower)}, {format_sig(interval.upper)}]")
    if run.station_skill is not None:
        print(f"  Station-mean NMAE (test): {format_percent(run.station_skill)}")


def prepare_command(args):
    """Handle prepare command"""
    experiment = _experiment(args)
    out_dir = _out_dir(args) / "prepare"
    if args.met_grid:
        if not args.stations:
            raise ValueError("--met-grid needs --stations <csv> with station_id, lon, lat")
        met_path = met_table_from_grid(Path(args.met_grid), Path(args.stations), out_dir / "met-from-grid.csv")
        experiment = dataclasses.replace(experiment, met_table=str(met_path))
        print(f"🌍 Daily meteorology interpolated from {args.met_grid}: {met_path}")

    tables = validate_tables(experiment.scene_manifest, experiment.met_table, experiment.aq_table,
                             rh_scale=experiment.rh_scale)
    for name, validation in tables.items():
        print(format_validation_result(validation, title=f"{name} validation"))
        print()

    print(f"Preparing {experiment.image_type} corpus from {experiment.scene_manifest}...")
    corpus = prepare_corpus(experiment, derive_seeds(experiment.seed))
    paths = write_corpus_report(corpus, out_dir)

    print("✅ Corpus prepared")
    print(format_json_report(corpus.summary))
    for name, path in paths.items():
        print(f"  {name}: {path}")


def synth_command(args):
    """Handle synth command"""
    synth_config = load_synth_config(Path(args.config) if args.config else None)
    if args.seed is not None:
        synth_config = dataclasses.replace(synth_config, seed=args.seed)
    out_dir = _out_dir(args) / "synthetic"
    print(f"Generating {synth_config.n_stations} stations x {synth_config.n_days} days into {out_dir}...")
    paths = write_corpus(synth_config, out_dir, workers=args.workers)

    print("✅ Synthetic corpus written")
    print(f"  Scene manifest: {paths.scene_manifest}")
    print(f"  Meteorology: {paths.met}")
    print(f"  Air quality: {paths.aq}")
    print(f"  Ground truth: {paths.truth}")


def pretrain_command(args):
    """Handle pretrain command"""
    experiment = _experiment(args)
    if args.epochs is not None:
        experiment = dataclasses.replace(experiment, simsiam_epochs=args.epochs)
    if args.corpus is not None:
        experiment = dataclasses.replace(experiment, simsiam_corpus=args.corpus)
    seeds = derive_seeds(experiment.seed)
    corpus = prepare_corpus(experiment, seeds)
    path = pretrain_backbone(experiment, corpus, seeds, pretrained_path(experiment, _out_dir(args)))

    print(f"✅ Pre-trained backbone saved: {path}")
    print("Use it with family 'simsiam' by setting pretrained_backbone in the experiment config")


def train_command(args):
    """Handle train command"""
    experiment = _experiment(args)
    print(f"Training {experiment.run_name}...")
    _print_run(run_experiment(experiment, _out_dir(args)))


def matrix_command(args):
    """Handle matrix command"""
    matrix = MatrixConfig.from_file(_require_config(args))
    if args.seed is not None:
        matrix = dataclasses.replace(matrix, seeds=(args.seed,))
    experiments = matrix.experiments()
    if args.dry_run:
        print(f"Matrix has {len(experiments)} runs:")
        print(format_table([
            {"family": e.family, "features": e.features, "target": e.target,
             "image_type": e.image_type, "seed": e.seed}
            for e in experiments
        ]))
        return

    out_dir = _out_dir(args)
    runs = run_matrix(matrix, out_dir)
    paths = emit_report(runs, out_dir / "report", seed_mean=len(matrix.seeds) > 1)
    print(f"✅ Matrix complete: {len(runs)} runs")
    print(f"  Results table: {paths.table}")
    print(f"  Per-split metrics: {paths.long}")


def report_command(args):
    """Handle report command"""
    runs_dir = Path(args.runs) if args.runs else _out_dir(args)
    run_dirs = find_runs(runs_dir)
    if not run_dirs:
        print(f"❌ No finished runs under {runs_dir}")
        sys.exit(1)

    runs = []
    for run_dir in run_dirs:
        try:
            runs.append(load_run(run_dir))
        except ValueError as e:
            print(f"⚠️  Skipping {run_dir.name}: {e}")
    seed_mean = args.seed_mean or len({run.config.seed for run in runs}) > 1
    paths = emit_report(runs, _out_dir(args) / "report", seed_mean=seed_mean)

    print(f"✅ Report built from {len(runs)} runs")
    print(f"  Results table: {paths.table}")
    print(f"  Per-split metrics: {paths.long}")
    if paths.bootstrap:
        print(f"  Bootstrap intervals: {paths.bootstrap}")


def convert_weights_command(args):
    """Handle convert-weights command"""
    path = convert_checkpoint(Path(args.source), Path(args.dest), args.format, Path(config.WEIGHTS_MANIFEST))
    print(f"✅ Converted {args.source} -> {path} ({args.format} naming)")


def status_command(args):
    """Handle status command"""
    config.print_config_summary()

    out_dir = _out_dir(args)
    run_dirs = find_runs(out_dir) if out_dir.exists() else []
    print(f"\n📁 Finished runs in {out_dir}: {len(run_dirs)}")
    for run_dir in run_dirs[-10:]:
        print(f"  • {run_dir.name}")

    print("\nUse 'python cli.py --help' to see all available commands")


def main():
    """Main CLI entry point"""
    parser = argparse.ArgumentParser(
        description="opsat: PM10 and oxidative potential from satellite patches and meteorology",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate a synthetic corpus
  python cli.py --config ../data/synthetic.json --out runs synth

  # Build splits, normalisation stats and correlation tables
  python cli.py --config ../data/experiment-example.json prepare
  python cli.py --config ../data/experiment-example.json prepare --met-grid era5.csv --stations stations.csv

  # Pre-train a SimSiam backbone on the train-split scenes
  python cli.py --config ../data/experiment-example.json pretrain --epochs 100

  # Train and evaluate one configuration
  python cli.py --config ../data/experiment-example.json --seed 1 train

  # List, then run the full results matrix
  python cli.py --config ../data/matrix-table2.json matrix --dry-run
  python cli.py --config ../data/matrix-table2.json matrix

  # Rebuild the results table from finished runs
  python cli.py --out runs report

  # Convert an external checkpoint to a named-tensor archive
  python cli.py convert-weights --source bj.pth.tar --dest bj.safetensors --format simsiam_reference
        """
    )

    parser.add_argument('--config', help='Experiment, matrix or synthetic config file')
    parser.add_argument('--seed', type=int, help='Override the root seed')
    parser.add_argument('--out', help=f'Output directory (default: {config.OUT_DIR})')

    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    prepare_parser = subparsers.add_parser('prepare', help='Build the corpus, splits and statistics')
    prepare_parser.add_argument('--met-grid', help='Hourly gridded reanalysis CSV (time, lon, lat, met variables) to use instead of met_table')
    prepare_parser.add_argument('--stations', help='Station locations CSV (station_id, lon, lat) for --met-grid')
    prepare_parser.set_defaults(func=prepare_command)

    synth_parser = subparsers.add_parser('synth', help='Generate a synthetic corpus')
    synth_parser.add_argument('--workers', type=int, default=1, help='Scene rendering threads')
    synth_parser.set_defaults(func=synth_command)

    pretrain_parser = subparsers.add_parser('pretrain', help='SimSiam pre-training of a backbone')
    pretrain_parser.add_argument('--epochs', type=int, help='Override simsiam_epochs')
    pretrain_parser.add_argument('--corpus', choices=['train', 'all'], help='Override simsiam_corpus')
    pretrain_parser.set_defaults(func=pretrain_command)

    train_parser = subparsers.add_parser('train', help='Train and evaluate one configuration')
    train_parser.set_defaults(func=train_command)

    matrix_parser = subparsers.add_parser('matrix', help='Run a configuration matrix and report it')
    matrix_parser.add_argument('--dry-run', action='store_true', help='List the runs without executing')
    matrix_parser.set_defaults(func=matrix_command)

    report_parser = subparsers.add_parser('report', help='Aggregate finished runs into result tables')
    report_parser.add_argument('--runs', help='Directory holding run folders (default: --out)')
    report_parser.add_argument('--seed-mean', action='store_true', help='Add seed-mean rows')
    report_parser.set_defaults(func=report_command)

    convert_parser = subparsers.add_parser('convert-weights', help='Convert an external checkpoint')
    convert_parser.add_argument('--source', required=True, help='Torch checkpoint file')
    convert_parser.add_argument('--dest', required=True, help='Output .safetensors file')
    convert_parser.add_argument('--format', required=True, help='Naming format from the weights manifest')
    convert_parser.set_defaults(func=convert_weights_command)

    status_parser = subparsers.add_parser('status', help='Show configuration and finished runs')
    status_parser.set_defaults(func=status_command)

    args = parser.parse_args()

    if args.command is None:
        parser.print_help()
        return

    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        args.func(args)

    except KeyboardInterrupt:
        print("\n❌ Operation cancelled by user")
        sys.exit(1)

    except Exception as e:
        print(f"❌ Error: {e}")
        sys.exit(1)

if __name__ == "__main__":
    main()
