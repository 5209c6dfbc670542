"""Atomic CSV/JSON writers, metrics files and combining-weight heatmaps."""

from __future__ import annotations

import io
import json
import logging
from pathlib import Path
from typing import Any, Iterable, List, Sequence

import numpy as np
import pandas as pd
from PIL import Image

from lrlc_core.errors import ShapeError
from lrlc_core.serialization import atomic_write_bytes

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "split", "loss", "top1", "lr", "seconds"]


def write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, payload: Any) -> Path:
    return write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    return write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def metrics_frame(history: Iterable[Any]) -> pd.DataFrame:
    rows = [row.to_dict() for row in history]
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def write_metrics(path: Path, history: Iterable[Any]) -> Path:
    """Rewrite ``epoch,split,loss,top1,lr,seconds`` in full; earlier rows never change."""

    return write_frame(path, metrics_frame(history))


def heatmap_csv(weights: np.ndarray) -> str:
    buffer = io.StringIO()
    np.savetxt(buffer, weights, delimiter=",", fmt="%.17g")
    return buffer.getvalue()


def heatmap_pgm(weights: np.ndarray) -> bytes:
    """8-bit binary PGM with 0 -> black and 1 -> white."""

    pixels = np.clip(np.rint(weights * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PPM")
    return buffer.getvalue()


def write_heatmaps(weights: np.ndarray, out_dir: Path, prefix: str) -> List[Path]:
    """One ``<prefix>_k<k>.csv`` and ``.pgm`` per basis index of an H x W x K weight table."""

    if weights.ndim != 3:
        raise ShapeError(f"write_heatmaps: expected H x W x K weights, got {weights.shape}")
    written: List[Path] = []
    for k in range(weights.shape[2]):
        plane = np.asarray(weights[:, :, k], dtype=np.float64)
        written.append(write_text(Path(out_dir) / f"{prefix}_k{k}.csv", heatmap_csv(plane)))
        written.append(atomic_write_bytes(Path(out_dir) / f"{prefix}_k{k}.pgm", heatmap_pgm(plane)))
    logger.debug("Wrote %d heatmap planes for %s", weights.shape[2], prefix)
    return written


def read_heatmap_csv(paths: Sequence[Path]) -> np.ndarray:
    """Stack per-k CSV planes back into H x W x K."""

    planes = [np.loadtxt(path, delimiter=",", ndmin=2) for path in paths]
    return np.stack(planes, axis=2)
