"""Checkpoint directories: ``manifest.json`` plus one tensor container per array."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

from lrlc_core.errors import DataFormatError
from lrlc_core.network import Network, build_network
from lrlc_core.serialization import atomic_write_bytes, load_tensor, save_tensor
from lrlc_core.specs import ModelSpec

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TENSOR_DIR = "tensors"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Model spec, arrays and optimizer moments needed to restore or resume a run."""

    spec: ModelSpec
    state: Dict[str, np.ndarray]
    lowered: bool = False
    moments: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)  # {"m": {...}, "v": {...}}
    optimizer_step: int = 0
    epoch: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_network(cls, network: Network, **kwargs: Any) -> "Checkpoint":
        state = {key: value.copy() for key, value in network.state().items()}
        return cls(spec=network.spec, state=state, lowered=network.lowered_from_lrlc, **kwargs)


def _tensor_path(directory: Path, key: str) -> Path:
    return directory / TENSOR_DIR / f"{key}.lrlc"


def save_checkpoint(directory: Path, checkpoint: Checkpoint) -> Path:
    """Write tensors first and the manifest last, each atomically."""

    directory = Path(directory)
    index: Dict[str, str] = {}
    for key, value in checkpoint.state.items():
        index[key] = str(save_tensor(_tensor_path(directory, key), value).relative_to(directory))
    moment_index: Dict[str, Dict[str, str]] = {}
    for moment, arrays in checkpoint.moments.items():
        moment_index[moment] = {}
        for key, value in arrays.items():
            path = save_tensor(_tensor_path(directory, f"adam.{moment}.{key}"), value)
            moment_index[moment][key] = str(path.relative_to(directory))
    manifest = {
        "format": FORMAT_VERSION,
        "model": checkpoint.spec.model_dump(mode="json"),
        "lowered": checkpoint.lowered,
        "epoch": checkpoint.epoch,
        "optimizer_step": checkpoint.optimizer_step,
        "tensors": index,
        "moments": moment_index,
        "metadata": checkpoint.metadata,
    }
    payload = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(directory / MANIFEST_NAME, payload.encode("utf-8"))
    logger.debug("Checkpoint written to %s (epoch %d)", directory, checkpoint.epoch)
    return directory


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataFormatError(manifest_path, 0, "checkpoint manifest is missing") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(manifest_path, exc.pos, f"invalid manifest JSON: {exc.msg}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise DataFormatError(manifest_path, 0, f"unsupported checkpoint format {manifest.get('format')!r}")
    state = {key: load_tensor(directory / name) for key, name in manifest["tensors"].items()}
    moments = {
        moment: {key: load_tensor(directory / name) for key, name in arrays.items()}
        for moment, arrays in manifest.get("moments", {}).items()
    }
    return Checkpoint(
        spec=ModelSpec.model_validate(manifest["model"]),
        state=state,
        lowered=bool(manifest.get("lowered", False)),
        moments=moments,
        optimizer_step=int(manifest.get("optimizer_step", 0)),
        epoch=int(manifest.get("epoch", 0)),
        metadata=manifest.get("metadata", {}),
    )


def restore_network(checkpoint: Checkpoint) -> Network:
    """Rebuild the network structure from the saved model spec, then load every saved array."""

    network = build_network(checkpoint.spec, np.random.default_rng(0))
    if checkpoint.lowered:
        network = network.lowered()
    network.load_state(checkpoint.state)
    return network
