"""Independent oracles and synthetic dataset writers shared by the test suite."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from lrlc_core.gradcheck import GradCheckReport, grad_check
from lrlc_core.tensor_ops import named_arrays

# Synthetic bar dataset used by the fixtures.
TRAIN_EXAMPLES = 96
TEST_EXAMPLES = 32
VALIDATION_SIZE = 16
IMAGE_SIZE = 8


def conv_oracle(images: np.ndarray, filters: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct SAME-padded convolution, one output element at a time."""

    n, height, width, _ = images.shape
    fh, fw, _, cout = filters.shape
    out = np.zeros((n, height, width, cout))
    for b in range(n):
        for i in range(height):
            for j in range(width):
                for dy in range(fh):
                    for dx in range(fw):
                        row, col = i + dy - fh // 2, j + dx - fw // 2
                        if 0 <= row < height and 0 <= col < width:
                            out[b, i, j] += images[b, row, col] @ filters[dy, dx]
    return out + bias


def local_oracle(images: np.ndarray, filters: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct locally connected layer: bank filters[i, j] at output (i, j)."""

    n, height, width, _ = images.shape
    fh, fw, _, cout = filters.shape[2:]
    out = np.zeros((n, height, width, cout))
    for b in range(n):
        for i in range(height):
            for j in range(width):
                for dy in range(fh):
                    for dx in range(fw):
                        row, col = i + dy - fh // 2, j + dx - fw // 2
                        if 0 <= row < height and 0 <= col < width:
                            out[b, i, j] += images[b, row, col] @ filters[i, j, dy, dx]
    return out + bias


def check_layer(
    op: str,
    layer,
    forward_fn: Callable,
    backward_fn: Callable,
    images: np.ndarray,
    rng: np.random.Generator,
    *,
    tolerance: float = 1e-5,
    sample: int | None = None,
    kinks: Sequence[float] = (),
) -> GradCheckReport:
    """grad_check over the input and every trainable array of a parameter dataclass.

    ``forward_fn(images, layer)`` returns the output; ``backward_fn(grad, images, layer)``
    returns ``(grad_images, grads)`` where ``grads`` has the layer's own type, or is
    None for parameter-free ops (``layer=None``).
    """

    targets = named_arrays(layer) if layer is not None else {}
    names = list(targets)

    def load(arrays: Sequence[np.ndarray]) -> None:
        for name, value in zip(names, arrays):
            targets[name][...] = value

    def forward(x, *arrays):
        load(arrays)
        return forward_fn(x, layer)

    def backward(weights, x, *arrays):
        load(arrays)
        grad_images, grads = backward_fn(weights, x, layer)
        flat = named_arrays(grads) if grads is not None else {}
        return [grad_images, *(flat[name] for name in names)]

    initial = [value.copy() for value in targets.values()]
    output_weights = rng.standard_normal(np.shape(forward(images, *initial)))
    report = grad_check(
        op,
        forward,
        backward,
        [images, *initial],
        tolerance,
        names=["input", *names],
        output_weights=output_weights,
        sample=sample,
        kinks=kinks,
    )
    assert report.checked > 0, report
    return report


def idx_images_bytes(pixels: np.ndarray) -> bytes:
    count, rows, cols = pixels.shape[:3]
    return struct.pack(">IIII", 2051, count, rows, cols) + pixels.astype(np.uint8).tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 2049, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()


def cifar_bytes(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    """Records of one label byte followed by the R, G and B planes of a 32 x 32 x 3 image."""

    records = []
    for image, label in zip(pixels, labels):
        planes = np.ascontiguousarray(image.transpose(2, 0, 1)).astype(np.uint8)
        records.append(bytes([int(label)]) + planes.tobytes())
    return b"".join(records)


def bar_images(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Class 0 draws a horizontal bar, class 1 a vertical bar, over low-level noise."""

    pixels = rng.integers(0, 40, size=(len(labels), size, size)).astype(np.uint8)
    for index, label in enumerate(labels):
        line = rng.integers(1, size - 1)
        if label == 0:
            pixels[index, line, :] = 255
        else:
            pixels[index, :, line] = 255
    return pixels


def write_mnist(
    directory: Path,
    train_pixels: np.ndarray,
    train_labels: np.ndarray,
    test_pixels: np.ndarray,
    test_labels: np.ndarray,
    *,
    compress: bool = False,
) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    payloads = {
        "train-images-idx3-ubyte": idx_images_bytes(train_pixels),
        "train-labels-idx1-ubyte": idx_labels_bytes(train_labels),
        "t10k-images-idx3-ubyte": idx_images_bytes(test_pixels),
        "t10k-labels-idx1-ubyte": idx_labels_bytes(test_labels),
    }
    for name, payload in payloads.items():
        if compress:
            (directory / f"{name}.gz").write_bytes(gzip.compress(payload))
        else:
            (directory / name).write_bytes(payload)
    return directory
