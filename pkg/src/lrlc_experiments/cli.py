"""``lrlc`` command line: train, eval, sweep, lower, costs and heatmaps."""

from __future__ import annotations

import argparse
import json
import logging
import numbers
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from lrlc_core.errors import ConfigSchemaError, LrlcError
from lrlc_core.specs import MAX_RANK, RANKED_KINDS, LayerKind, Placement
from lrlc_core.tensor_ops import numeric_mode

from .artifacts import write_frame
from .checkpoints import load_checkpoint, restore_network
from .config import ExperimentConfig, load_config
from .optimize import evaluate
from .sweep import COSTS_NAME, Cell, SweepResult, export_heatmaps, load_data, lower, report_costs, run_experiment

logger = logging.getLogger("lrlc_experiments")
console = Console()

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def _config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="experiment config (JSON); defaults apply when omitted")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. --set training.batch_size=64",
    )
    parser.add_argument("--epochs", type=int, help="shorthand for --set training.epochs=N")
    parser.add_argument("--seeds", type=int, nargs="+", help="shorthand for --set sweep.seeds=[...]")
    parser.add_argument("--output-dir", help="shorthand for --set output_dir=PATH")
    parser.add_argument("--parallel", type=int, help="number of sweep cells run concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrlc", description="Low-rank locally connected layer experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a single (kind, rank, placement, seed) cell")
    _config_arguments(train)
    train.add_argument("--kind", choices=[kind.value for kind in LayerKind])
    train.add_argument("--rank", type=int)
    train.add_argument("--placement", choices=[placement.value for placement in Placement])
    train.add_argument("--seed", type=int)

    sweep = commands.add_parser("sweep", help="run every configured cell and write results and summary CSVs")
    _config_arguments(sweep)

    evaluate_cmd = commands.add_parser("eval", help="evaluate a checkpoint on a split")
    _config_arguments(evaluate_cmd)
    evaluate_cmd.add_argument("checkpoint", type=Path)
    evaluate_cmd.add_argument("--split", choices=["validation", "test"], default="test")
    evaluate_cmd.add_argument("--lowered", action="store_true", help="lower LRLC layers before evaluating")

    lower_cmd = commands.add_parser("lower", help="materialize fixed LRLC layers into locally connected layers")
    lower_cmd.add_argument("checkpoint", type=Path)
    lower_cmd.add_argument("out", type=Path)

    costs = commands.add_parser("costs", help="parameter and MAC report per layer kind")
    _config_arguments(costs)
    costs.add_argument("--ranks", type=int, nargs="+", help="ranks to report (default: sweep.ranks)")

    heatmaps = commands.add_parser("heatmaps", help="export normalized combining weights as CSV and PGM")
    _config_arguments(heatmaps)
    heatmaps.add_argument("checkpoint", type=Path)
    heatmaps.add_argument("out", type=Path)
    heatmaps.add_argument(
        "--examples", type=int, default=0, help="test examples used for input-dependent layers (needs the dataset)"
    )
    return parser


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    if args.epochs is not None:
        overrides.append(f"training.epochs={args.epochs}")
    if args.seeds:
        overrides.append(f"sweep.seeds={json.dumps(args.seeds)}")
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.parallel is not None:
        overrides.append(f"sweep.parallel={args.parallel}")
    return overrides


def _load(args: argparse.Namespace, *, require_data: bool) -> ExperimentConfig:
    return load_config(args.config, _overrides(args), require_data=require_data)


def _single_cell(config: ExperimentConfig, args: argparse.Namespace) -> Cell:
    kind = LayerKind(args.kind) if args.kind else config.sweep.kinds[0]
    rank: Optional[int] = None
    if kind in RANKED_KINDS:
        rank = args.rank if args.rank is not None else config.sweep.ranks[0]
    placement = Placement.ALL if kind == LayerKind.CONV else Placement(args.placement or config.sweep.placements[0])
    seed = args.seed if args.seed is not None else config.sweep.seeds[0]
    return Cell(kind=kind.value, rank=rank, placement=placement.value, seed=seed)


def _print_summary(result: SweepResult) -> None:
    table = Table(title=f"Summary ({result.output_dir})")
    for column in result.summary.columns:
        table.add_column(str(column))
    for row in result.summary.itertuples(index=False):
        table.add_row(*(f"{value:.4f}" if isinstance(value, float) else str(value) for value in row))
    console.print(table)


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load(args, require_data=True)
    cell = _single_cell(config, args)
    if cell.rank is not None and not 1 <= cell.rank <= MAX_RANK:
        raise ConfigSchemaError([f"--rank: must be within 1..{MAX_RANK}, got {cell.rank}"])
    result = run_experiment(config, cells=[cell])
    _print_summary(result)
    return EXIT_OK if result.ok else EXIT_FAILED


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _load(args, require_data=True)
    result = run_experiment(config)
    _print_summary(result)
    return EXIT_OK if result.ok else EXIT_FAILED


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load(args, require_data=True)
    with numeric_mode(test_mode=config.training.test_mode):
        _, validation, test = load_data(config)
        network = restore_network(load_checkpoint(args.checkpoint))
        if args.lowered:
            network = network.lowered()
        result = evaluate(network, validation if args.split == "validation" else test)
    console.print(f"{args.split} top-1: {result.top1:.4f} (loss {result.loss:.4f})")
    return EXIT_OK


def _cmd_lower(args: argparse.Namespace) -> int:
    lower(args.checkpoint, args.out)
    return EXIT_OK


def _cmd_costs(args: argparse.Namespace) -> int:
    config = _load(args, require_data=False)
    frame = report_costs(config, args.ranks)
    path = write_frame(Path(config.output_dir) / COSTS_NAME, frame)
    table = Table(title=f"Costs ({path})")
    columns = ["kind", "rank", "placement", "mode", "layer_params", "layer_macs", "model_params", "model_macs"]
    for column in columns:
        table.add_column(column, justify="right" if column.startswith(("layer", "model")) else "left")
    for row in frame[columns].itertuples(index=False):
        table.add_row(*(_cell_text(value) for value in row))
    console.print(table)
    return EXIT_OK


def _cell_text(value: object) -> str:
    if value is None or pd.isna(value):
        return ""
    if isinstance(value, numbers.Integral):
        return f"{int(value):,}"
    return str(value)


def _cmd_heatmaps(args: argparse.Namespace) -> int:
    config = _load(args, require_data=args.examples > 0)
    images = None
    if args.examples > 0:
        _, _, test = load_data(config)
        images = test.images[: args.examples]
    written = export_heatmaps(args.checkpoint, args.out, images, max_examples=max(args.examples, 1))
    console.print(f"wrote {len(written)} heatmap file(s) to {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "eval": _cmd_eval,
    "lower": _cmd_lower,
    "costs": _cmd_costs,
    "heatmaps": _cmd_heatmaps,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except ConfigSchemaError as exc:
        console.print(f"[red]invalid configuration[/red]\n{escape(str(exc))}")
        return EXIT_CONFIG
    except (LrlcError, FileNotFoundError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
