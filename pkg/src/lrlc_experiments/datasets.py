"""MNIST (IDX) and CIFAR-10 (binary) readers, deterministic splits and the translated-canvas synthesizer."""

from __future__ import annotations

import gzip
import hashlib
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lrlc_core.errors import ConfigurationError, DataFormatError
from lrlc_core.tensor_ops import Tensor, default_dtype

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
NUM_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{index}.bin" for index in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class DatasetSplit:
    """One immutable split; ``mean``/``std`` are the per-channel training statistics used to standardize."""

    name: str
    images: Tensor  # N x H x W x C, standardized
    labels: np.ndarray  # int64
    checksum: str
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    std: np.ndarray = field(default_factory=lambda: np.ones(1))
    offsets: Optional[np.ndarray] = None  # N x 2 (row, col) when translated

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(self.name, 0, f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(int(extent) for extent in self.images.shape[1:])


@dataclass
class TranslateSpec:
    """Paste every image at a uniform offset on a uniform-noise canvas of ``canvas`` x ``canvas``."""

    canvas: Optional[int] = None
    seed: int = 0

    def extent_for(self, height: int, width: int) -> int:
        if self.canvas is not None:
            return self.canvas
        return int(round(1.5 * max(height, width)))


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} not found")
    payload = path.read_bytes()
    return gzip.decompress(payload) if path.suffix == ".gz" else payload


def _locate(directory: Path, name: str) -> Path:
    plain = directory / name
    return plain if plain.exists() else directory / (name + ".gz")


def parse_idx_images(payload: bytes, source: object) -> np.ndarray:
    if len(payload) < 16:
        raise DataFormatError(source, len(payload), "truncated IDX image header")
    magic, count, rows, cols = np.frombuffer(payload, dtype=">u4", count=4)
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(source, 0, f"bad IDX image magic {int(magic)}, expected {IDX_IMAGE_MAGIC}")
    expected = 16 + int(count) * int(rows) * int(cols)
    if len(payload) < expected:
        raise DataFormatError(source, len(payload), f"short IDX image file, expected {expected} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=expected - 16, offset=16)
    return pixels.reshape(int(count), int(rows), int(cols), 1)


def parse_idx_labels(payload: bytes, source: object) -> np.ndarray:
    if len(payload) < 8:
        raise DataFormatError(source, len(payload), "truncated IDX label header")
    magic, count = np.frombuffer(payload, dtype=">u4", count=2)
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(source, 0, f"bad IDX label magic {int(magic)}, expected {IDX_LABEL_MAGIC}")
    if len(payload) < 8 + int(count):
        raise DataFormatError(source, len(payload), f"short IDX label file, expected {8 + int(count)} bytes")
    labels = np.frombuffer(payload, dtype=np.uint8, count=int(count), offset=8).astype(np.int64)
    _check_labels(labels, source, header=8, stride=1)
    return labels


def parse_cifar_records(payload: bytes, source: object) -> Tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records (label, then R, G, B planes) into N x 32 x 32 x 3 pixels."""

    remainder = len(payload) % CIFAR_RECORD_BYTES
    if remainder or not payload:
        raise DataFormatError(source, len(payload) - remainder, f"trailing partial record of {remainder} bytes")
    records = np.frombuffer(payload, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    _check_labels(labels, source, header=0, stride=CIFAR_RECORD_BYTES)
    pixels = records[:, 1:].reshape(-1, *CIFAR_SHAPE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(pixels), labels


def _check_labels(labels: np.ndarray, source: object, *, header: int, stride: int) -> None:
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        index = int(bad[0])
        raise DataFormatError(source, header + index * stride, f"label {int(labels[index])} outside 0..9")


def _checksum(payloads: Sequence[bytes]) -> str:
    digest = hashlib.sha256()
    for payload in payloads:
        digest.update(payload)
    return digest.hexdigest()


_CHUNK = 4096


def _channel_stats(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    count = raw.shape[0] * raw.shape[1] * raw.shape[2]
    mean = raw.sum(axis=(0, 1, 2), dtype=np.float64) / (255.0 * count)
    squares = np.zeros(raw.shape[3], dtype=np.float64)
    for start in range(0, raw.shape[0], _CHUNK):
        chunk = raw[start : start + _CHUNK].astype(np.float64) / 255.0 - mean
        squares += np.square(chunk).sum(axis=(0, 1, 2))
    std = np.sqrt(squares / count)
    return mean, np.where(std > 0, std, 1.0)


def _apply_stats(raw: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    out = np.empty(raw.shape, dtype=default_dtype())
    for start in range(0, raw.shape[0], _CHUNK):
        out[start : start + _CHUNK] = (raw[start : start + _CHUNK].astype(np.float64) / 255.0 - mean) / std
    return out


def _standardize(
    train_raw: np.ndarray, others: Sequence[np.ndarray]
) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
    """Scale pixels to [0, 1], then standardize every array with the training per-channel statistics."""

    mean, std = _channel_stats(train_raw)
    return mean, std, [_apply_stats(raw, mean, std) for raw in (train_raw, *others)]


def _build_splits(
    train_pixels: np.ndarray,
    train_labels: np.ndarray,
    test_pixels: np.ndarray,
    test_labels: np.ndarray,
    *,
    checksum: str,
    validation_size: int,
    train_limit: Optional[int],
    test_limit: Optional[int],
) -> Tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    total = train_pixels.shape[0]
    if validation_size >= total:
        raise ConfigurationError(f"validation_size {validation_size} leaves no training examples out of {total}")
    cut = total - validation_size
    train_x, train_y = train_pixels[:cut], train_labels[:cut]
    valid_x, valid_y = train_pixels[cut:], train_labels[cut:]
    if train_limit is not None:
        train_x, train_y = train_x[:train_limit], train_y[:train_limit]
    if test_limit is not None:
        test_pixels, test_labels = test_pixels[:test_limit], test_labels[:test_limit]
    mean, std, (train_std, valid_std, test_std) = _standardize(train_x, [valid_x, test_pixels])
    splits = tuple(
        DatasetSplit(name=name, images=images, labels=labels.copy(), checksum=checksum, mean=mean, std=std)
        for name, images, labels in (
            ("train", train_std, train_y),
            ("validation", valid_std, valid_y),
            ("test", test_std, test_labels),
        )
    )
    logger.info("Splits: train=%d validation=%d test=%d", *(len(split) for split in splits))
    return splits


def load_mnist(
    directory: Path,
    *,
    validation_size: int = 5000,
    train_limit: Optional[int] = None,
    test_limit: Optional[int] = None,
) -> Tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Train / validation / test splits; validation is the tail of the official training files."""

    directory = Path(directory)
    payloads = []
    arrays = {}
    for split, (images_name, labels_name) in MNIST_FILES.items():
        images_path, labels_path = _locate(directory, images_name), _locate(directory, labels_name)
        images_bytes, labels_bytes = _read_bytes(images_path), _read_bytes(labels_path)
        payloads.extend([images_bytes, labels_bytes])
        images = parse_idx_images(images_bytes, images_path)
        labels = parse_idx_labels(labels_bytes, labels_path)
        if images.shape[0] != labels.shape[0]:
            raise DataFormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
        arrays[split] = (images, labels)
    logger.info("Loaded MNIST from %s", directory)
    return _build_splits(
        *arrays["train"],
        *arrays["test"],
        checksum=_checksum(payloads),
        validation_size=validation_size,
        train_limit=train_limit,
        test_limit=test_limit,
    )


def _read_cifar(directory: Path, names: Sequence[str], payloads: List[bytes]) -> Tuple[np.ndarray, np.ndarray]:
    pixels, labels = [], []
    for name in names:
        path = _locate(directory, name)
        payload = _read_bytes(path)
        payloads.append(payload)
        batch_pixels, batch_labels = parse_cifar_records(payload, path)
        pixels.append(batch_pixels)
        labels.append(batch_labels)
    return np.concatenate(pixels), np.concatenate(labels)


def load_cifar10(
    directory: Path,
    *,
    validation_size: int = 5000,
    train_limit: Optional[int] = None,
    test_limit: Optional[int] = None,
) -> Tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    directory = Path(directory)
    payloads: List[bytes] = []
    train_pixels, train_labels = _read_cifar(directory, CIFAR_TRAIN_FILES, payloads)
    test_pixels, test_labels = _read_cifar(directory, CIFAR_TEST_FILES, payloads)
    logger.info("Loaded CIFAR-10 from %s", directory)
    return _build_splits(
        train_pixels,
        train_labels,
        test_pixels,
        test_labels,
        checksum=_checksum(payloads),
        validation_size=validation_size,
        train_limit=train_limit,
        test_limit=test_limit,
    )


def translate_dataset(split: DatasetSplit, spec: TranslateSpec) -> DatasetSplit:
    """Paste each image at an independent uniform offset over fresh uniform noise.

    Noise is drawn in the raw [0, 1] pixel range and standardized with the
    split's training statistics. Offsets are fixed per example for a given
    seed and split name.
    """

    n, height, width, channels = split.images.shape
    canvas = spec.extent_for(height, width)
    if canvas < height or canvas < width:
        raise ConfigurationError(f"canvas {canvas} is smaller than the {height}x{width} source images")
    rng = np.random.default_rng([spec.seed, zlib.crc32(split.name.encode("utf-8"))])
    offsets = np.stack(
        [rng.integers(0, canvas - height + 1, size=n), rng.integers(0, canvas - width + 1, size=n)], axis=1
    )
    images = np.empty((n, canvas, canvas, channels), dtype=split.images.dtype)
    for index, (row, col) in enumerate(offsets):
        noise = rng.uniform(0.0, 1.0, size=(canvas, canvas, channels))
        images[index] = (noise - split.mean) / split.std
        images[index, row : row + height, col : col + width, :] = split.images[index]
    logger.debug("Translated %s onto a %dx%d canvas", split.name, canvas, canvas)
    return replace(split, images=images, offsets=offsets.astype(np.int64))
