"""Experiment configuration: pydantic models, schema validation and overrides."""

from __future__ import annotations

import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Dict, Iterable, List, Optional

from dotenv import load_dotenv
from jsonschema import Draft202012Validator
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from lrlc_core.errors import ConfigSchemaError
from lrlc_core.serialization import atomic_write_bytes
from lrlc_core.specs import MAX_RANK, RANKED_KINDS, LayerKind, ModelTemplate, Placement

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "LRLC_DATA_ROOT"
RESOLVED_CONFIG_NAME = "config.resolved.json"


class DatasetName(str, Enum):
    MNIST = "mnist"
    CIFAR10 = "cifar10"


DATASET_DIRS = {DatasetName.MNIST: "mnist", DatasetName.CIFAR10: "cifar-10-batches-bin"}


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: DatasetName = DatasetName.MNIST
    root: Optional[str] = Field(default=None, description=f"dataset root; falls back to ${DATA_ROOT_ENV}")
    validation_size: int = Field(default=5000, ge=1)
    train_limit: Optional[int] = Field(default=None, ge=2)
    test_limit: Optional[int] = Field(default=None, ge=1)
    translate: bool = False
    canvas: Optional[int] = Field(default=None, ge=1, description="translated canvas extent; default 1.5x the source")
    translate_seed: int = Field(default=0, ge=0)


class TrainingConfig(BaseModel):
    """Optimizer and schedule settings. No label smoothing or gradient clipping is applied."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=128, ge=2)
    peak_rate: float = Field(default=0.01, gt=0)
    warmup_epochs: int = Field(default=2, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    test_mode: bool = False
    evaluate_lowered: bool = True
    resume: bool = False

    @model_validator(mode="after")
    def _check_warmup(self) -> "TrainingConfig":
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be smaller than epochs ({self.epochs}) "
                "so the rate decays to zero by the last step"
            )
        return self


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kinds: List[LayerKind] = Field(default_factory=lambda: [LayerKind.CONV, LayerKind.LRLC], min_length=1)
    ranks: List[Annotated[int, Field(ge=1, le=MAX_RANK)]] = Field(default_factory=lambda: [2])
    placements: List[Placement] = Field(default_factory=lambda: [Placement.THIRD], min_length=1)
    seeds: List[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    parallel: int = Field(default=1, ge=1, description="concurrent sweep cells")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    output_dir: str = "runs/experiment"
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelTemplate = Field(default_factory=ModelTemplate)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)


def config_schema() -> Dict[str, Any]:
    return ExperimentConfig.model_json_schema()


def _location(path: Iterable[Any]) -> str:
    return ".".join(str(part) for part in path) or "<root>"


def _semantic_violations(config: ExperimentConfig, *, require_data: bool) -> List[str]:
    violations: List[str] = []
    sweep = config.sweep
    ranked = [kind for kind in sweep.kinds if kind in RANKED_KINDS]
    if ranked and not sweep.ranks:
        violations.append(f"sweep.ranks: required for ranked kinds {[kind.value for kind in ranked]}")
    if not ranked and sweep.ranks:
        violations.append("sweep.ranks: only lrlc, dynamic_lrlc and wide_conv layers take a rank")
    for placement in sweep.placements:
        if placement != Placement.ALL and ["first", "second", "third"].index(placement.value) >= config.model.depth:
            violations.append(f"sweep.placements: {placement.value} is beyond model depth {config.model.depth}")
    if config.model.filter_size % 2 == 0:
        violations.append(f"model.filter_size: must be odd, got {config.model.filter_size}")
    if require_data:
        root = resolve_data_root(config)
        if root is None:
            violations.append(f"data.root: not set and ${DATA_ROOT_ENV} is empty")
        elif not dataset_dir(config, root).is_dir():
            violations.append(f"data.root: dataset directory {dataset_dir(config, root)} does not exist")
    return violations


def validate_config(raw: Dict[str, Any], *, require_data: bool = True) -> ExperimentConfig:
    """Schema check, model construction and cross-field checks; every violation is reported at once."""

    validator = Draft202012Validator(config_schema())
    violations = [
        f"{_location(error.absolute_path)}: {error.message}"
        for error in sorted(validator.iter_errors(raw), key=lambda error: list(map(str, error.absolute_path)))
    ]
    if violations:
        raise ConfigSchemaError(violations)
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigSchemaError(f"{_location(item['loc'])}: {item['msg']}" for item in exc.errors()) from exc
    violations = _semantic_violations(config, require_data=require_data)
    if violations:
        raise ConfigSchemaError(violations)
    return config


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], assignments: Iterable[str]) -> Dict[str, Any]:
    """Apply ``dotted.key=value`` assignments; values are parsed as JSON when possible."""

    updated = json.loads(json.dumps(raw))
    problems = []
    for assignment in assignments:
        key, sep, value = assignment.partition("=")
        if not sep or not key.strip():
            problems.append(f"--set {assignment!r}: expected dotted.key=value")
            continue
        node = updated
        parts = key.strip().split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                problems.append(f"--set {key}: {part} is not a section")
                break
            node = child
        else:
            node[parts[-1]] = _parse_value(value)
    if problems:
        raise ConfigSchemaError(problems)
    return updated


def read_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigSchemaError([f"config file {path} does not exist"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigSchemaError([f"config file {path}: line {exc.lineno}: {exc.msg}"]) from exc
    if not isinstance(payload, dict):
        raise ConfigSchemaError([f"config file {path}: top level must be an object"])
    return payload


def load_config(
    path: Optional[Path] = None, overrides: Iterable[str] = (), *, require_data: bool = True
) -> ExperimentConfig:
    load_dotenv()
    raw = apply_overrides(read_config_file(path), overrides)
    config = validate_config(raw, require_data=require_data)
    logger.debug("Loaded config %s from %s", config.name, path or "<defaults>")
    return config


def dumps_config(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def dump_config(config: ExperimentConfig, path: Path) -> Path:
    return atomic_write_bytes(path, dumps_config(config).encode("utf-8"))


def resolve_data_root(config: ExperimentConfig) -> Optional[Path]:
    root = config.data.root or os.environ.get(DATA_ROOT_ENV)
    return Path(root).expanduser() if root else None


def dataset_dir(config: ExperimentConfig, root: Optional[Path] = None) -> Path:
    root = root or resolve_data_root(config)
    if root is None:
        raise ConfigSchemaError([f"data.root: not set and ${DATA_ROOT_ENV} is empty"])
    return root / DATASET_DIRS[config.data.name]
