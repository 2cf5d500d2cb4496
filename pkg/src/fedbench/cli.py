"""Command-line interface: single runs, sweeps, data verification and reports."""

import argparse
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .config import config_schema, data_dir, load_environment, out_dir, resolve_config
from .defaults import ExitCodes, ExperimentDefaults, KpiNames
from .errors import ConfigError, DataError
from .fedproto import run_experiment
from .mnist import MnistFiles, label_histogram, load_mnist, load_split
from .models import ArchitectureKind, ExperimentConfig, LatencyModel, RunRecord
from .report import (
    canonical_json,
    emit_run,
    emit_tradeoff,
    load_record,
    round_summary_line,
    run_dir_name,
    tradeoff_table,
)

SUBCOMMANDS = ("run", "sweep", "verify-data", "tradeoff", "schema")

# CLI flag destination -> ExperimentConfig key
FLAG_KEYS = {
    "arch": "arch",
    "nodes": "n_participants",
    "rounds": "rounds",
    "epochs": "epochs_per_round",
    "seed": "master_seed",
    "latency": "latency",
    "deadline": "round_deadline",
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "weighting": "weighting",
    "topology": "dfl_topology",
    "workers": "workers",
    "threshold": "convergence_threshold",
}


@dataclass
class CliConfig:
    """Parsed command line."""

    subcommand: str
    config_path: Optional[str] = None
    overrides: Dict[str, Any] = field(default_factory=dict)
    out_dir: Optional[str] = None
    data_dir: Optional[str] = None
    quiet: bool = False
    arch_list: List[str] = field(default_factory=lambda: list(ExperimentDefaults.SWEEP_ARCHS))
    nodes_list: List[int] = field(default_factory=lambda: list(ExperimentDefaults.SWEEP_NODES))
    jobs: int = 1
    records: List[str] = field(default_factory=list)


def _latency(text: str) -> str:
    try:
        return LatencyModel.parse(text).describe()
    except ConfigError as e:
        raise argparse.ArgumentTypeError("; ".join(e.problems))


def _split_list(values: Sequence[str]) -> List[str]:
    items = []
    for value in values:
        items.extend(part for part in value.replace(",", " ").split() if part)
    return items


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    archs = [k.value for k in ArchitectureKind]
    parser.add_argument("--arch", "-a", choices=archs, help=f"Architecture ({', '.join(archs)})")
    parser.add_argument("--nodes", "-n", type=int, help="Number of participants")
    parser.add_argument("--rounds", "-r", type=int, help=f"Federation rounds (default: {ExperimentDefaults.ROUNDS})")
    parser.add_argument("--epochs", "-e", type=int, help=f"Local epochs per round (default: {ExperimentDefaults.EPOCHS_PER_ROUND})")
    parser.add_argument("--seed", "-s", type=int, help=f"Master seed (default: {ExperimentDefaults.MASTER_SEED} or FEDBENCH_SEED)")
    parser.add_argument("--config", "-c", help="JSON config file (flags override its values)")
    parser.add_argument("--data", "-d", help="MNIST directory (default: FEDBENCH_DATA_DIR or data/mnist)")
    parser.add_argument("--out", "-o", help="Output root directory (default: FEDBENCH_OUT_DIR or results)")
    parser.add_argument("--latency", type=_latency, help="Latency model: zero, fixed:D or uniform:LO:HI")
    parser.add_argument("--deadline", type=int, help="Round deadline in simulated time units")
    parser.add_argument("--lr", type=float, help=f"Learning rate (default: {ExperimentDefaults.LEARNING_RATE})")
    parser.add_argument("--batch-size", "-b", type=int, help=f"Mini-batch size (default: {ExperimentDefaults.BATCH_SIZE})")
    parser.add_argument("--weighting", choices=["uniform", "samples"], help="FedAvg weighting (default: uniform)")
    parser.add_argument("--topology", choices=["full", "ring"], help="DFL topology (default: full)")
    parser.add_argument("--workers", type=int, help="Threads for local training (default: 1)")
    parser.add_argument("--threshold", type=float, help="Accuracy defining the convergence round (default: 0.90)")
    parser.add_argument("--quiet", "-q", action="store_true", help="Suppress per-round progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbench",
        description="Federated learning benchmark - CFL, DFL and SDFL on MNIST over a simulated network",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run --arch dfl --nodes 3 --seed 7
  %(prog)s run --arch sdfl --nodes 6 --latency uniform:1:9 --deadline 6
  %(prog)s sweep --arch-list cfl,dfl --nodes-list 3 4 --jobs 2
  %(prog)s verify-data --data data/mnist
  %(prog)s tradeoff results/*/record.json --out results
  %(prog)s schema

Exit codes:
  0 success, 1 runtime failure, 2 configuration error, 3 missing or corrupt data
        """,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    run = sub.add_parser("run", help="Run one experiment")
    _add_experiment_flags(run)

    sweep = sub.add_parser("sweep", help="Run every architecture x participant-count combination")
    _add_experiment_flags(sweep)
    sweep.add_argument("--arch-list", nargs="+", help="Architectures to sweep (default: cfl dfl sdfl)")
    sweep.add_argument("--nodes-list", nargs="+", help="Participant counts to sweep (default: 3 4 6 8)")
    sweep.add_argument("--jobs", "-j", type=int, default=1, help="Combinations run in parallel (default: 1)")

    verify = sub.add_parser("verify-data", help="Check the MNIST files")
    verify.add_argument("--data", "-d", help="MNIST directory (default: FEDBENCH_DATA_DIR or data/mnist)")

    tradeoff = sub.add_parser("tradeoff", help="Rebuild the trade-off table from saved records")
    tradeoff.add_argument("records", nargs="+", help="record.json files")
    tradeoff.add_argument("--out", "-o", help="Directory for tradeoff.json and tradeoff.txt")

    sub.add_parser("schema", help="Print the JSON schema of config files")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> CliConfig:
    """
    Parse the command line.

    Raises:
        SystemExit: With code 2 on usage errors (argparse behaviour)
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    cli = CliConfig(subcommand=args.subcommand)

    if args.subcommand in ("run", "sweep"):
        cli.config_path = args.config
        cli.out_dir = args.out
        cli.data_dir = args.data
        cli.quiet = args.quiet
        cli.overrides = {
            key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if getattr(args, dest) is not None
        }
    if args.subcommand == "sweep":
        if args.arch_list:
            archs = [a.lower() for a in _split_list(args.arch_list)]
            bad = [a for a in archs if a not in [k.value for k in ArchitectureKind]]
            if bad:
                parser.error(f"invalid --arch-list value(s) {', '.join(bad)}; valid values: cfl, dfl, sdfl")
            cli.arch_list = archs
        if args.nodes_list:
            try:
                cli.nodes_list = [int(n) for n in _split_list(args.nodes_list)]
            except ValueError:
                parser.error(f"--nodes-list expects integers, got {' '.join(args.nodes_list)}")
        if args.jobs < 1:
            parser.error(f"--jobs must be >= 1, got {args.jobs}")
        cli.jobs = args.jobs
    if args.subcommand == "verify-data":
        cli.data_dir = args.data
    if args.subcommand == "tradeoff":
        cli.records = list(args.records)
        cli.out_dir = args.out
    return cli


def _error(message: str) -> None:
    print(f"Error: {message}", file=sys.stderr)


def _print_summary(title: str, lines: List[str]) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for line in lines:
        print(line)
    print("=" * 60)


def _load_data(cli: CliConfig):
    directory = data_dir(cli.data_dir)
    print(f"Loading MNIST from {directory}...")
    train, test = load_mnist(directory)
    print(f"Loaded {len(train)} training and {len(test)} test images")
    return train, test


def _run_lines(record: RunRecord, run_dir: Path) -> List[str]:
    final = record.final
    conv = record.convergence_round
    return [
        f"Final accuracy: {final.accuracy * 100:.2f}%",
        f"Final loss: {final.loss:.4f}",
        f"Convergence round: {conv if conv is not None else 'not reached'}",
        f"Total bytes: {record.total_bytes}",
        f"Total FLOPs: {record.total_flops}",
        f"\nOutputs saved to: {run_dir}",
    ]


def cmd_run(cli: CliConfig) -> int:
    """Run one experiment and write its artifacts."""
    try:
        config = resolve_config(cli.config_path, cli.overrides)
    except ConfigError as e:
        _error(e)
        return ExitCodes.CONFIG

    try:
        datasets = _load_data(cli)
    except DataError as e:
        _error(e)
        return ExitCodes.DATA

    deadline_active = config.round_deadline is not None

    def on_round(round_record):
        if not cli.quiet:
            print(round_summary_line(round_record, deadline_active))

    try:
        record = run_experiment(config, datasets, verbose=not cli.quiet, on_round=on_round)
        run_dir = emit_run(record, out_dir(cli.out_dir))
    except ConfigError as e:
        _error(e)
        return ExitCodes.CONFIG
    except KeyboardInterrupt:
        print("\n\nOperation cancelled by user.")
        return ExitCodes.RUNTIME
    except Exception as e:
        _error(e)
        traceback.print_exc()
        return ExitCodes.RUNTIME

    _print_summary(
        f"{config.arch.value.upper()} RUN COMPLETE ({config.n_participants} participants, seed {config.master_seed})",
        _run_lines(record, run_dir),
    )
    return ExitCodes.SUCCESS


def _sweep_configs(cli: CliConfig) -> List[ExperimentConfig]:
    configs = []
    problems = []
    for arch in cli.arch_list:
        for n in cli.nodes_list:
            try:
                configs.append(resolve_config(cli.config_path, {**cli.overrides, "arch": arch, "n_participants": n}))
            except ConfigError as e:
                problems.extend(f"{arch} N={n}: {p}" for p in e.problems)
    if problems:
        raise ConfigError(problems)
    return configs


def cmd_sweep(cli: CliConfig) -> int:
    """Run every (arch, N) combination, then write the trade-off table."""
    try:
        configs = _sweep_configs(cli)
    except ConfigError as e:
        _error(e)
        return ExitCodes.CONFIG

    try:
        datasets = _load_data(cli)
    except DataError as e:
        _error(e)
        return ExitCodes.DATA

    root = out_dir(cli.out_dir)
    verbose = cli.jobs == 1 and not cli.quiet
    print(f"Sweeping {len(configs)} combinations with {cli.jobs} job(s)...")

    def execute(config: ExperimentConfig) -> Tuple[ExperimentConfig, RunRecord]:
        deadline_active = config.round_deadline is not None

        def on_round(round_record):
            if verbose:
                print(round_summary_line(round_record, deadline_active))

        record = run_experiment(config, datasets, verbose=verbose, on_round=on_round)
        emit_run(record, root)
        print(f"  {run_dir_name(config)}: final accuracy {record.final.accuracy * 100:.2f}%")
        return config, record

    records: List[RunRecord] = []
    current = None
    try:
        if cli.jobs == 1:
            for config in configs:
                current = config
                records.append(execute(config)[1])
        else:
            with ThreadPoolExecutor(max_workers=cli.jobs) as pool:
                futures = [(config, pool.submit(execute, config)) for config in configs]
                for config, future in futures:
                    current = config
                    records.append(future.result()[1])
        table, text = tradeoff_table(records)
        json_path, text_path = emit_tradeoff(table, root)
    except KeyboardInterrupt:
        print("\n\nOperation cancelled by user.")
        return ExitCodes.RUNTIME
    except Exception as e:
        where = f" at {current.arch.value} N={current.n_participants}" if current is not None else ""
        _error(f"sweep failed{where}: {e}")
        traceback.print_exc()
        return ExitCodes.CONFIG if isinstance(e, ConfigError) else ExitCodes.RUNTIME

    print()
    print(text, end="")
    _print_summary("SWEEP COMPLETE", [f"Runs: {len(records)}", f"Trade-off table saved to: {json_path} and {text_path}"])
    return ExitCodes.SUCCESS


def cmd_verify_data(cli: CliConfig) -> int:
    """Parse the four IDX files and check counts and class coverage."""
    directory = data_dir(cli.data_dir)
    print(f"Verifying MNIST files in {directory}...")
    if not directory.is_dir():
        _error(f"MNIST directory not found: {directory}")
        return ExitCodes.DATA

    splits = (
        ("train", MnistFiles.TRAIN_IMAGES, MnistFiles.TRAIN_LABELS, MnistFiles.TRAIN_SIZE),
        ("test", MnistFiles.TEST_IMAGES, MnistFiles.TEST_LABELS, MnistFiles.TEST_SIZE),
    )
    ok = True
    for name, image_names, label_names, expected in splits:
        try:
            dataset = load_split(directory, image_names, label_names)
        except DataError as e:
            _error(e)
            return ExitCodes.DATA
        histogram = label_histogram(dataset)
        print(f"\n{name}: {len(dataset)} images ({dataset.n_features} pixels each)")
        for cls, count in enumerate(histogram):
            print(f"  class {cls}: {count}")
        if len(dataset) != expected:
            _error(f"{name} split has {len(dataset)} images, expected {expected}")
            ok = False
        missing = [cls for cls, count in enumerate(histogram) if count == 0]
        if len(histogram) != KpiNames.N_CLASSES or missing:
            _error(f"{name} split is missing classes {missing}")
            ok = False

    if not ok:
        return ExitCodes.DATA
    print("\nMNIST files verified.")
    return ExitCodes.SUCCESS


def cmd_tradeoff(cli: CliConfig) -> int:
    """Rebuild the trade-off table from saved run records."""
    records = []
    for path in cli.records:
        try:
            records.append(load_record(path))
        except (OSError, ValueError, KeyError, TypeError) as e:
            _error(f"cannot load record {path}: {e}")
            return ExitCodes.DATA
    try:
        table, text = tradeoff_table(records)
    except ValueError as e:
        _error(e)
        return ExitCodes.CONFIG
    print(text, end="")
    if cli.out_dir:
        json_path, text_path = emit_tradeoff(table, cli.out_dir)
        print(f"\nTrade-off table saved to: {json_path} and {text_path}")
    return ExitCodes.SUCCESS


def cmd_schema(cli: CliConfig) -> int:
    print(canonical_json(config_schema()), end="")
    return ExitCodes.SUCCESS


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "verify-data": cmd_verify_data,
    "tradeoff": cmd_tradeoff,
    "schema": cmd_schema,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    load_environment()
    try:
        cli = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else ExitCodes.CONFIG
    try:
        return COMMANDS[cli.subcommand](cli)
    except ConfigError as e:
        _error(e)
        return ExitCodes.CONFIG
