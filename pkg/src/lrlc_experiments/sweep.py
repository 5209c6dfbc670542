"""Sweep runner: cells over layer kind x rank x placement x seed, summaries, costs, lowering and heatmaps."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dataclasses_json import dataclass_json

from lrlc_core.costs import CostMode, model_costs
from lrlc_core.errors import UnsupportedOperationError
from lrlc_core.network import DynamicLrlc, Lrlc, Network
from lrlc_core.specs import RANKED_KINDS, LayerKind, ModelSpec, Placement
from lrlc_core.tensor_ops import Tensor, numeric_mode

from .artifacts import write_frame, write_heatmaps, write_json, write_metrics
from .checkpoints import Checkpoint, load_checkpoint, restore_network, save_checkpoint
from .config import RESOLVED_CONFIG_NAME, DatasetName, ExperimentConfig, dataset_dir, dump_config
from .datasets import DatasetSplit, TranslateSpec, load_cifar10, load_mnist, translate_dataset
from .optimize import TrainRun, evaluate, predict, train

logger = logging.getLogger(__name__)

SOURCE_SHAPES = {DatasetName.MNIST: (28, 28, 1), DatasetName.CIFAR10: (32, 32, 3)}
COST_KINDS = (
    LayerKind.CONV,
    LayerKind.LOCAL,
    LayerKind.COORDCONV,
    LayerKind.WIDE_CONV,
    LayerKind.LRLC,
    LayerKind.DYNAMIC_LRLC,
)
RESULTS_NAME = "results.csv"
SUMMARY_NAME = "summary.csv"
COSTS_NAME = "costs.csv"

Splits = Tuple[DatasetSplit, DatasetSplit, DatasetSplit]


@dataclass_json
@dataclass
class Cell:
    kind: str
    rank: Optional[int]
    placement: str
    seed: int

    @property
    def group_id(self) -> str:
        rank = f"-k{self.rank}" if self.rank is not None else ""
        return f"{self.kind}{rank}-{self.placement}"

    @property
    def cell_id(self) -> str:
        return f"{self.group_id}-s{self.seed}"


@dataclass_json
@dataclass
class CellResult:
    """Outcome of one sweep cell, one row of results.csv."""

    kind: str
    rank: Optional[int]
    placement: str
    seed: int
    status: str = "ok"
    epochs: int = 0
    best_epoch: int = -1
    valid_top1: float = float("nan")
    test_top1: float = float("nan")
    lowered_test_top1: Optional[float] = None
    lowered_agreement: Optional[float] = None
    error: str = ""

    @classmethod
    def for_cell(cls, cell: Cell, **kwargs) -> "CellResult":
        return cls(kind=cell.kind, rank=cell.rank, placement=cell.placement, seed=cell.seed, **kwargs)


@dataclass
class SweepResult:
    results: List[CellResult]
    summary: pd.DataFrame
    output_dir: Path
    failed: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed


def plan_cells(config: ExperimentConfig) -> List[Cell]:
    """Convolution baselines run once per seed; other kinds cross ranks (when ranked) with placements."""

    cells: List[Cell] = []
    for kind in config.sweep.kinds:
        ranks: Sequence[Optional[int]] = config.sweep.ranks if kind in RANKED_KINDS else [None]
        placements = [Placement.ALL] if kind == LayerKind.CONV else config.sweep.placements
        for placement in placements:
            for rank in ranks:
                for seed in config.sweep.seeds:
                    cells.append(Cell(kind=kind.value, rank=rank, placement=placement.value, seed=seed))
    return cells


def input_shape_for(config: ExperimentConfig) -> Tuple[int, int, int]:
    height, width, channels = SOURCE_SHAPES[config.data.name]
    if config.data.translate:
        canvas = TranslateSpec(canvas=config.data.canvas).extent_for(height, width)
        return canvas, canvas, channels
    return height, width, channels


def load_data(config: ExperimentConfig) -> Splits:
    loader = load_mnist if config.data.name == DatasetName.MNIST else load_cifar10
    splits = loader(
        dataset_dir(config),
        validation_size=config.data.validation_size,
        train_limit=config.data.train_limit,
        test_limit=config.data.test_limit,
    )
    if config.data.translate:
        spec = TranslateSpec(canvas=config.data.canvas, seed=config.data.translate_seed)
        splits = tuple(translate_dataset(split, spec) for split in splits)
    return splits


def model_for(config: ExperimentConfig, cell: Cell, input_shape: Tuple[int, int, int]) -> ModelSpec:
    return config.model.build(
        LayerKind(cell.kind),
        rank=cell.rank,
        placement=Placement(cell.placement),
        input_shape=input_shape,
    )


def _has_fixed_lrlc(network: Network) -> bool:
    return any(isinstance(module, Lrlc) for module in network.modules) and not any(
        isinstance(module, DynamicLrlc) for module in network.modules
    )


def run_cell(config: ExperimentConfig, cell: Cell, data: Splits, output_dir: Path) -> CellResult:
    """Train one (kind, rank, placement, seed) cell and evaluate it; failures are recorded, not raised."""

    train_split, valid_split, test_split = data
    cell_dir = Path(output_dir) / "cells" / cell.cell_id
    checkpoint_dir = cell_dir / "checkpoint"
    try:
        spec = model_for(config, cell, train_split.image_shape)
        if config.training.resume and (checkpoint_dir / "manifest.json").exists():
            run = TrainRun.resume(checkpoint_dir, config.training)
        else:
            run = TrainRun.create(spec, cell.seed, config.training, checkpoint_dir=checkpoint_dir)
        metrics_path = cell_dir / "metrics.csv"
        train(run, train_split, valid_split, on_epoch=lambda current: write_metrics(metrics_path, current.history))
        write_metrics(metrics_path, run.history)
        save_checkpoint(checkpoint_dir, run.checkpoint())
        result = CellResult.for_cell(
            cell,
            epochs=run.epoch,
            best_epoch=run.best_epoch,
            valid_top1=evaluate(run.network, valid_split).top1,
            test_top1=evaluate(run.network, test_split).top1,
        )
        if config.training.evaluate_lowered and _has_fixed_lrlc(run.network):
            lowered = run.network.lowered()
            result.lowered_test_top1 = evaluate(lowered, test_split).top1
            agreement = predict(lowered, test_split.images) == predict(run.network, test_split.images)
            result.lowered_agreement = float(agreement.mean()) if agreement.size else 1.0
            save_checkpoint(cell_dir / "lowered", Checkpoint.from_network(lowered))
        logger.info("Cell %s: validation %.4f test %.4f", cell.cell_id, result.valid_top1, result.test_top1)
        return result
    except Exception as exc:  # noqa: BLE001
        logger.exception("Cell %s failed", cell.cell_id)
        return CellResult.for_cell(cell, status="failed", error=f"{type(exc).__name__}: {exc}")


def results_frame(results: Sequence[CellResult]) -> pd.DataFrame:
    frame = pd.DataFrame([result.to_dict() for result in results], columns=list(CellResult.__dataclass_fields__))
    frame["rank"] = frame["rank"].astype("Int64")
    return frame


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard error (sample std / sqrt(seeds)) per group; marks the validation-optimal rank."""

    ok = results[results["status"] == "ok"]
    grouped = ok.groupby(["kind", "rank", "placement"], dropna=False, sort=True)
    summary = grouped.agg(
        seeds=("seed", "count"),
        valid_mean=("valid_top1", "mean"),
        valid_std=("valid_top1", "std"),
        test_mean=("test_top1", "mean"),
        test_std=("test_top1", "std"),
    ).reset_index()
    root = np.sqrt(summary["seeds"].astype(float))
    summary["valid_se"] = (summary.pop("valid_std") / root).fillna(0.0)
    summary["test_se"] = (summary.pop("test_std") / root).fillna(0.0)
    summary["optimal_rank"] = False
    ranked = summary["kind"].isin([kind.value for kind in RANKED_KINDS])
    for _, group in summary[ranked].groupby(["kind", "placement"], sort=True):
        summary.loc[group["valid_mean"].idxmax(), "optimal_rank"] = True
    return summary[
        ["kind", "rank", "placement", "seeds", "valid_mean", "valid_se", "test_mean", "test_se", "optimal_rank"]
    ]


def run_experiment(config: ExperimentConfig, cells: Optional[Sequence[Cell]] = None) -> SweepResult:
    """Run every cell (or the given subset) and write results.csv and summary.csv."""

    output_dir = Path(config.output_dir)
    dump_config(config, output_dir / RESOLVED_CONFIG_NAME)
    cells = list(cells) if cells is not None else plan_cells(config)
    with numeric_mode(test_mode=config.training.test_mode):
        data = load_data(config)
        logger.info("Running %d cell(s) with %d worker(s)", len(cells), config.sweep.parallel)
        if config.sweep.parallel > 1:
            with ThreadPoolExecutor(max_workers=config.sweep.parallel) as pool:
                results = list(pool.map(lambda cell: run_cell(config, cell, data, output_dir), cells))
        else:
            results = [run_cell(config, cell, data, output_dir) for cell in cells]
    frame = results_frame(results)
    write_frame(output_dir / RESULTS_NAME, frame)
    summary = summarize(frame)
    write_frame(output_dir / SUMMARY_NAME, summary)
    failed = [Cell(r.kind, r.rank, r.placement, r.seed).cell_id for r in results if r.status != "ok"]
    if failed:
        logger.error("%d cell(s) failed: %s", len(failed), ", ".join(failed))
    return SweepResult(results=results, summary=summary, output_dir=output_dir, failed=failed)


def _breakdown(report) -> str:
    return ";".join(f"{key}={value}" for key, value in report.param_breakdown.items())


def report_costs(
    config: ExperimentConfig,
    ranks: Optional[Sequence[int]] = None,
    *,
    input_shape: Optional[Tuple[int, int, int]] = None,
) -> pd.DataFrame:
    """Parameter and MAC table for every layer kind at the configured placements and the given ranks.

    ``layer_*`` columns cover the placed layers only; ``model_*`` columns the whole network.
    """

    input_shape = input_shape or input_shape_for(config)
    ranks = list(ranks or config.sweep.ranks or [1, 2, 4, 8])
    rows = []
    for kind in COST_KINDS:
        placements = [Placement.ALL] if kind == LayerKind.CONV else config.sweep.placements
        kind_ranks: Sequence[Optional[int]] = ranks if kind in RANKED_KINDS else [None]
        if kind == LayerKind.LRLC:
            modes = [CostMode.TRAIN, CostMode.LOWERED_INFERENCE]
        elif kind == LayerKind.DYNAMIC_LRLC:
            modes = [CostMode.DYNAMIC]
        else:
            modes = [CostMode.TRAIN]
        for placement in placements:
            for rank in kind_ranks:
                spec = config.model.build(kind, rank=rank, placement=placement, input_shape=input_shape)
                positions = placement.positions(len(spec.layers))
                for mode in modes:
                    reports = model_costs(spec, mode)
                    placed = [reports[2 * position] for position in positions]
                    rows.append(
                        {
                            "kind": kind.value,
                            "rank": rank,
                            "placement": placement.value,
                            "mode": mode.value,
                            "layer_params": sum(report.trainable_params for report in placed),
                            "layer_macs": sum(report.inference_macs for report in placed),
                            "layer_param_bytes": sum(report.inference_param_bytes for report in placed),
                            "layer_elementwise_ops": sum(report.elementwise_ops for report in placed),
                            "layer_breakdown": _breakdown(placed[0]),
                            "model_params": sum(report.trainable_params for report in reports),
                            "model_macs": sum(report.inference_macs for report in reports),
                        }
                    )
    frame = pd.DataFrame(rows)
    frame["rank"] = frame["rank"].astype("Int64")
    return frame


def lower(checkpoint_dir: Path, out_dir: Path) -> Path:
    """Materialize every fixed-weight LRLC layer of a checkpoint into a locally connected layer."""

    network = restore_network(load_checkpoint(checkpoint_dir))
    if any(isinstance(module, DynamicLrlc) for module in network.modules):
        raise UnsupportedOperationError(
            "cannot lower dynamic_lrlc layers: per-example filters cannot be pre-materialized"
        )
    lowered = network.lowered()
    save_checkpoint(out_dir, Checkpoint.from_network(lowered, metadata={"source": str(checkpoint_dir)}))
    logger.info("Lowered model written to %s", out_dir)
    return Path(out_dir)


def export_heatmaps(
    checkpoint_dir: Path, out_dir: Path, images: Optional[Tensor] = None, *, max_examples: int = 4
) -> List[Path]:
    """Normalized combining weights per layer and basis index as CSV + PGM.

    Input-dependent layers need ``images``; one set of files is written per example.
    """

    network = restore_network(load_checkpoint(checkpoint_dir))
    written: List[Path] = []
    layer_inputs: Optional[List[Tensor]] = None
    summary: Dict[str, List[int]] = {"layers": [], "examples": []}
    for position, module in network.feature_layers():
        if isinstance(module, Lrlc):
            written.extend(write_heatmaps(module.combining_weights(), out_dir, f"layer{position}"))
            summary["layers"].append(position)
        elif isinstance(module, DynamicLrlc):
            if images is None:
                logger.warning("Layer %d is input-dependent; pass example images to export its weights", position)
                continue
            if layer_inputs is None:
                layer_inputs = network.layer_inputs(images[:max_examples])
            weights = module.combining_weights(layer_inputs[position])
            for example in range(weights.shape[0]):
                written.extend(write_heatmaps(weights[example], out_dir, f"layer{position}_example{example}"))
            summary["layers"].append(position)
            summary["examples"] = list(range(weights.shape[0]))
    if not summary["layers"]:
        logger.warning("Checkpoint %s has no LRLC layers with exportable weights", checkpoint_dir)
    write_json(Path(out_dir) / "heatmaps.json", summary)
    return written
