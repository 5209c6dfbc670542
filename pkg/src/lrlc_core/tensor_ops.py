"""Dense tensor helpers: numeric mode, patch extraction and matrix products.

Activations are laid out N x H x W x C and filter banks h x w x Cin x Cout.
Every convolution-style operator in the package goes through
``extract_patches`` / ``fold_patches`` so the index arithmetic lives in one
place.
"""

from __future__ import annotations

import dataclasses
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

from .errors import ConfigurationError, NonFiniteError, ShapeError

Tensor = NDArray[np.floating]
# N x (H*W) x (h*w*Cin); row i*W + j is the SAME-padded patch centred on (i, j).
PatchMatrix = NDArray[np.floating]


@dataclasses.dataclass
class NumericMode:
    """Process-wide numeric settings.

    Test mode forces float64 and serial ``einsum`` reductions so repeated calls
    are bitwise identical; training mode uses float32 and BLAS.
    """

    test_mode: bool = False

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.test_mode else np.float32)


_MODE = NumericMode()
_MODE_LOCK = threading.RLock()


def current_mode() -> NumericMode:
    return _MODE


def set_test_mode(enabled: bool) -> None:
    with _MODE_LOCK:
        _MODE.test_mode = bool(enabled)


@contextmanager
def numeric_mode(*, test_mode: bool) -> Iterator[NumericMode]:
    """Temporarily switch the numeric mode."""

    with _MODE_LOCK:
        previous = _MODE.test_mode
        _MODE.test_mode = test_mode
    try:
        yield _MODE
    finally:
        with _MODE_LOCK:
            _MODE.test_mode = previous


def default_dtype() -> np.dtype:
    return _MODE.dtype


def as_tensor(value: Any) -> Tensor:
    """Convert to a contiguous array in the active dtype."""

    return np.ascontiguousarray(value, dtype=default_dtype())


def ensure_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    return value


def require_rank(value: np.ndarray, ndim: int, name: str) -> None:
    if value.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dimensions, got shape {value.shape}")


def check_filter_size(filter_h: int, filter_w: int) -> Tuple[int, int]:
    """Return the SAME padding for a centred filter; even sizes are rejected."""

    if filter_h < 1 or filter_w < 1:
        raise ConfigurationError(f"filter size must be positive, got {filter_h}x{filter_w}")
    if filter_h % 2 == 0 or filter_w % 2 == 0:
        raise ConfigurationError(f"filter size must be odd for centred patches, got {filter_h}x{filter_w}")
    return filter_h // 2, filter_w // 2


def extract_patches(images: Tensor, filter_h: int, filter_w: int) -> PatchMatrix:
    """im2col with SAME zero padding and stride 1.

    Returns an array of shape N x (H*W) x (filter_h*filter_w*C); each row is
    flattened in (dy, dx, c) order to match a flattened h x w x Cin filter bank.
    """

    pad_h, pad_w = check_filter_size(filter_h, filter_w)
    require_rank(images, 4, "extract_patches")
    n, height, width, channels = images.shape
    padded = np.pad(images, ((0, 0), (pad_h, pad_h), (pad_w, pad_w), (0, 0)))
    windows = sliding_window_view(padded, (filter_h, filter_w), axis=(1, 2))
    # windows: N x H x W x C x fh x fw
    patches = windows.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(patches).reshape(n, height * width, filter_h * filter_w * channels)


def fold_patches(
    patches: PatchMatrix,
    input_shape: Tuple[int, int, int, int],
    filter_h: int,
    filter_w: int,
) -> Tensor:
    """Adjoint of ``extract_patches`` (col2im): scatter-add rows back onto the image."""

    pad_h, pad_w = check_filter_size(filter_h, filter_w)
    n, height, width, channels = input_shape
    expected = (n, height * width, filter_h * filter_w * channels)
    if patches.shape != expected:
        raise ShapeError(f"fold_patches: expected {expected}, got {patches.shape}")
    grid = patches.reshape(n, height, width, filter_h, filter_w, channels)
    padded = np.zeros((n, height + 2 * pad_h, width + 2 * pad_w, channels), dtype=patches.dtype)
    for dy in range(filter_h):
        for dx in range(filter_w):
            padded[:, dy : dy + height, dx : dx + width, :] += grid[:, :, :, dy, dx, :]
    return padded[:, pad_h : pad_h + height, pad_w : pad_w + width, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m x k and a k x n matrix."""

    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if _MODE.test_mode:
        return np.einsum("ik,kj->ij", a, b, optimize=False)
    return a @ b


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over a shared leading axis: B x m x k times B x k x n."""

    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"batched_matmul: incompatible shapes {a.shape} and {b.shape}")
    if _MODE.test_mode:
        return np.einsum("bik,bkj->bij", a, b, optimize=False)
    return np.matmul(a, b)


def named_arrays(obj: Any, prefix: str = "", *, trainable_only: bool = True) -> Dict[str, np.ndarray]:
    """Flatten the array fields of a (nested) parameter dataclass into dotted names.

    Fields declared with ``metadata={"trainable": False}`` are skipped when
    ``trainable_only`` is set; ``None`` fields are always skipped.
    """

    arrays: Dict[str, np.ndarray] = {}
    for field in dataclasses.fields(obj):
        if trainable_only and not field.metadata.get("trainable", True):
            continue
        value = getattr(obj, field.name)
        key = f"{prefix}{field.name}"
        if isinstance(value, np.ndarray):
            arrays[key] = value
        elif dataclasses.is_dataclass(value) and not isinstance(value, type):
            arrays.update(named_arrays(value, f"{key}.", trainable_only=trainable_only))
        elif isinstance(value, (list, tuple)):
            for index, item in enumerate(value):
                if isinstance(item, np.ndarray):
                    arrays[f"{key}.{index}"] = item
                elif dataclasses.is_dataclass(item):
                    arrays.update(named_arrays(item, f"{key}.{index}.", trainable_only=trainable_only))
    return arrays
