"""Reference layers: convolution, locally connected, spatial bias, CoordConv,
batch normalization, ReLU, global average pooling and the dense head.

Each operator is a pure ``*_forward`` function paired with an explicit
``*_backward`` that returns the input gradient and a parameter container of
the same type holding the parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor_ops import (
    Tensor,
    batched_matmul,
    check_filter_size,
    default_dtype,
    extract_patches,
    fold_patches,
    matmul,
    require_rank,
)

BATCHNORM_EPSILON = 1e-5
BATCHNORM_MOMENTUM = 0.9


class Phase(str, Enum):
    """Whether a stateful layer normalizes with batch or running statistics."""

    TRAIN = "train"
    INFERENCE = "inference"


def he_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=None) -> Tensor:
    """Fan-in scaled uniform initializer, bound sqrt(6 / fan_in)."""

    bound = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype or default_dtype())


@dataclass
class ConvLayer:
    """Shared filter bank applied at every position, with a per-channel bias."""

    filters: Tensor  # h x w x Cin x Cout
    bias: Tensor  # Cout

    def __post_init__(self) -> None:
        require_rank(self.filters, 4, "ConvLayer.filters")
        check_filter_size(self.filters.shape[0], self.filters.shape[1])
        if self.bias.shape != (self.filters.shape[3],):
            raise ShapeError(f"ConvLayer.bias: expected ({self.filters.shape[3]},), got {self.bias.shape}")

    @property
    def in_channels(self) -> int:
        return int(self.filters.shape[2])

    @property
    def out_channels(self) -> int:
        return int(self.filters.shape[3])

    @classmethod
    def initialize(
        cls, filter_size: int, in_channels: int, out_channels: int, rng: np.random.Generator
    ) -> "ConvLayer":
        fan_in = filter_size * filter_size * in_channels
        filters = he_uniform((filter_size, filter_size, in_channels, out_channels), fan_in, rng)
        return cls(filters=filters, bias=np.zeros(out_channels, dtype=filters.dtype))


@dataclass
class SpatialBias:
    """Additive bias B[i, j, c] = b_row[i] + b_col[j] + b_channel[c].

    The non-factorized variant stores the whole H x W x C table in ``full``
    and leaves the three vectors unset.
    """

    b_row: Optional[Tensor] = None
    b_col: Optional[Tensor] = None
    b_channel: Optional[Tensor] = None
    full: Optional[Tensor] = None

    def __post_init__(self) -> None:
        if self.full is not None:
            require_rank(self.full, 3, "SpatialBias.full")
            if any(v is not None for v in (self.b_row, self.b_col, self.b_channel)):
                raise ConfigurationError("SpatialBias: a full table excludes the row/column/channel vectors")
            return
        for name in ("b_row", "b_col", "b_channel"):
            value = getattr(self, name)
            if value is None:
                raise ConfigurationError("SpatialBias: factorized bias needs b_row, b_col and b_channel")
            require_rank(value, 1, f"SpatialBias.{name}")

    @classmethod
    def zeros(cls, height: int, width: int, channels: int, dtype=None, *, full: bool = False) -> "SpatialBias":
        dtype = dtype or default_dtype()
        if full:
            return cls(full=np.zeros((height, width, channels), dtype))
        return cls(np.zeros(height, dtype), np.zeros(width, dtype), np.zeros(channels, dtype))

    @property
    def is_full(self) -> bool:
        return self.full is not None

    @property
    def shape(self) -> Tuple[int, int, int]:
        if self.full is not None:
            return tuple(int(n) for n in self.full.shape)
        return int(self.b_row.shape[0]), int(self.b_col.shape[0]), int(self.b_channel.shape[0])

    def table(self) -> Tensor:
        if self.full is not None:
            return self.full
        return self.b_row[:, None, None] + self.b_col[None, :, None] + self.b_channel[None, None, :]

    def copy(self) -> "SpatialBias":
        if self.full is not None:
            return SpatialBias(full=self.full.copy())
        return SpatialBias(self.b_row.copy(), self.b_col.copy(), self.b_channel.copy())


@dataclass
class LocalLayer:
    """One filter bank per output position; ``spatial_bias`` is set on lowered layers."""

    filters: Tensor  # H x W x h x w x Cin x Cout
    bias: Tensor  # Cout
    spatial_bias: Optional[SpatialBias] = None

    def __post_init__(self) -> None:
        require_rank(self.filters, 6, "LocalLayer.filters")
        check_filter_size(self.filters.shape[2], self.filters.shape[3])

    @property
    def extent(self) -> Tuple[int, int]:
        return int(self.filters.shape[0]), int(self.filters.shape[1])

    @classmethod
    def initialize(
        cls,
        height: int,
        width: int,
        filter_size: int,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
    ) -> "LocalLayer":
        fan_in = filter_size * filter_size * in_channels
        filters = he_uniform((height, width, filter_size, filter_size, in_channels, out_channels), fan_in, rng)
        return cls(filters=filters, bias=np.zeros(out_channels, dtype=filters.dtype))


@dataclass
class BatchNormState:
    """Per-channel scale and shift plus the running statistics used at inference."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor = field(metadata={"trainable": False})
    running_var: Tensor = field(metadata={"trainable": False})
    epsilon: float = BATCHNORM_EPSILON
    momentum: float = BATCHNORM_MOMENTUM
    mode: Phase = Phase.TRAIN

    @classmethod
    def initialize(cls, channels: int, dtype=None) -> "BatchNormState":
        dtype = dtype or default_dtype()
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


@dataclass
class BatchNormCache:
    """Batch-normalized activations and the inverse deviations from the forward pass."""

    normalized: Tensor
    inv_std: Tensor


@dataclass
class DenseLayer:
    """Fully connected classification head."""

    weights: Tensor  # Cin x classes
    bias: Tensor

    @classmethod
    def initialize(cls, in_features: int, out_features: int, rng: np.random.Generator) -> "DenseLayer":
        weights = he_uniform((in_features, out_features), in_features, rng)
        return cls(weights=weights, bias=np.zeros(out_features, dtype=weights.dtype))


def conv2d_forward(images: Tensor, layer: ConvLayer, patches: Optional[Tensor] = None) -> Tensor:
    """SAME-padded stride-1 convolution evaluated as patches x flattened bank."""

    require_rank(images, 4, "conv2d_forward")
    if images.shape[3] != layer.in_channels:
        raise ShapeError(f"conv2d_forward: input has {images.shape[3]} channels, layer expects {layer.in_channels}")
    n, height, width, _ = images.shape
    fh, fw = layer.filters.shape[:2]
    if patches is None:
        patches = extract_patches(images, fh, fw)
    flat = matmul(patches.reshape(n * height * width, -1), layer.filters.reshape(-1, layer.out_channels))
    return (flat + layer.bias).reshape(n, height, width, layer.out_channels)


def conv2d_backward(
    grad_output: Tensor, images: Tensor, layer: ConvLayer, patches: Optional[Tensor] = None
) -> Tuple[Tensor, ConvLayer]:
    n, height, width, _ = images.shape
    fh, fw = layer.filters.shape[:2]
    if patches is None:
        patches = extract_patches(images, fh, fw)
    grad_flat = grad_output.reshape(-1, layer.out_channels)
    cols = patches.reshape(grad_flat.shape[0], -1)
    grad_filters = matmul(cols.T, grad_flat).reshape(layer.filters.shape)
    grad_bias = grad_flat.sum(axis=0)
    grad_cols = matmul(grad_flat, layer.filters.reshape(-1, layer.out_channels).T)
    grad_images = fold_patches(grad_cols.reshape(patches.shape), images.shape, fh, fw)
    return grad_images, ConvLayer(filters=grad_filters, bias=grad_bias)


def _check_local_extent(images: Tensor, layer: LocalLayer) -> None:
    require_rank(images, 4, "local_forward")
    height, width = layer.extent
    if images.shape[1:3] != (height, width):
        raise ShapeError(f"local_forward: input extent {images.shape[1:3]} != layer extent {(height, width)}")
    if images.shape[3] != layer.filters.shape[4]:
        raise ShapeError(f"local_forward: input has {images.shape[3]} channels, layer expects {layer.filters.shape[4]}")


def local_forward(images: Tensor, layer: LocalLayer, patches: Optional[Tensor] = None) -> Tensor:
    """Apply bank F(i, j) at every position (i, j)."""

    _check_local_extent(images, layer)
    n, height, width, _ = images.shape
    fh, fw = layer.filters.shape[2:4]
    out_channels = layer.filters.shape[5]
    if patches is None:
        patches = extract_patches(images, fh, fw)
    banks = layer.filters.reshape(height * width, -1, out_channels)
    per_position = batched_matmul(patches.transpose(1, 0, 2), banks)  # HW x N x Cout
    out = per_position.transpose(1, 0, 2).reshape(n, height, width, out_channels) + layer.bias
    if layer.spatial_bias is not None:
        out = spatial_bias_add(out, layer.spatial_bias)
    return out


def local_backward(
    grad_output: Tensor, images: Tensor, layer: LocalLayer, patches: Optional[Tensor] = None
) -> Tuple[Tensor, LocalLayer]:
    n, height, width, _ = images.shape
    fh, fw = layer.filters.shape[2:4]
    out_channels = layer.filters.shape[5]
    if patches is None:
        patches = extract_patches(images, fh, fw)
    grad_positions = grad_output.reshape(n, height * width, out_channels).transpose(1, 0, 2)  # HW x N x Cout
    positions = patches.transpose(1, 0, 2)  # HW x N x hwC
    banks = layer.filters.reshape(height * width, -1, out_channels)
    grad_banks = batched_matmul(positions.transpose(0, 2, 1), grad_positions)
    grad_cols = batched_matmul(grad_positions, banks.transpose(0, 2, 1)).transpose(1, 0, 2)
    grad_images = fold_patches(np.ascontiguousarray(grad_cols), images.shape, fh, fw)
    grads = LocalLayer(
        filters=grad_banks.reshape(layer.filters.shape),
        bias=grad_output.sum(axis=(0, 1, 2)),
        spatial_bias=spatial_bias_backward(grad_output, layer.spatial_bias) if layer.spatial_bias is not None else None,
    )
    return grad_images, grads


def spatial_bias_add(images: Tensor, bias: SpatialBias) -> Tensor:
    require_rank(images, 4, "spatial_bias_add")
    _, height, width, channels = images.shape
    if bias.shape != (height, width, channels):
        raise ShapeError(
            f"spatial_bias_add: bias extents {bias.shape} "
            f"do not match input {(height, width, channels)}"
        )
    return images + bias.table()[None]


def spatial_bias_backward(grad_output: Tensor, bias: Optional[SpatialBias] = None) -> SpatialBias:
    if bias is not None and bias.is_full:
        return SpatialBias(full=grad_output.sum(axis=0))
    return SpatialBias(
        b_row=grad_output.sum(axis=(0, 2, 3)),
        b_col=grad_output.sum(axis=(0, 1, 3)),
        b_channel=grad_output.sum(axis=(0, 1, 2)),
    )


def coordinate_channels(height: int, width: int, dtype=None) -> Tensor:
    """H x W x 2 map of (row, column) coordinates scaled to [-1, 1]; a single pixel sits at 0."""

    dtype = dtype or default_dtype()
    rows = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    cols = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    grid = np.empty((height, width, 2), dtype=dtype)
    grid[..., 0] = rows[:, None]
    grid[..., 1] = cols[None, :]
    return grid


def coordconv_augment(images: Tensor) -> Tensor:
    require_rank(images, 4, "coordconv_augment")
    n, height, width, _ = images.shape
    coords = np.broadcast_to(coordinate_channels(height, width, images.dtype), (n, height, width, 2))
    return np.concatenate([images, coords], axis=3)


def coordconv_backward(grad_output: Tensor) -> Tensor:
    return grad_output[..., :-2]


def batchnorm_forward(
    images: Tensor, state: BatchNormState, *, update_stats: bool = True
) -> Tuple[Tensor, Optional[BatchNormCache]]:
    """Per-channel normalization over every axis but the last.

    In train mode batch statistics are used and, unless ``update_stats`` is
    off, folded into the running statistics with momentum ``state.momentum``.
    """

    axes = tuple(range(images.ndim - 1))
    if state.mode == Phase.INFERENCE:
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        normalized = (images - state.running_mean) * inv_std
        return normalized * state.gamma + state.beta, None

    if images.shape[0] < 2:
        raise ConfigurationError("batchnorm_forward: train mode needs a batch of at least 2 examples")
    mean = images.mean(axis=axes)
    var = images.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    normalized = (images - mean) * inv_std
    if update_stats:
        state.running_mean[...] = state.momentum * state.running_mean + (1.0 - state.momentum) * mean
        state.running_var[...] = state.momentum * state.running_var + (1.0 - state.momentum) * var
    return normalized * state.gamma + state.beta, BatchNormCache(normalized=normalized, inv_std=inv_std)


def batchnorm_backward(
    grad_output: Tensor, cache: Optional[BatchNormCache], state: BatchNormState
) -> Tuple[Tensor, BatchNormState]:
    if cache is None:
        raise ConfigurationError("batchnorm_backward: no train-mode forward cache available")
    axes = tuple(range(grad_output.ndim - 1))
    count = grad_output.size // grad_output.shape[-1]
    grad_gamma = (grad_output * cache.normalized).sum(axis=axes)
    grad_beta = grad_output.sum(axis=axes)
    grad_norm = grad_output * state.gamma
    grad_images = (cache.inv_std / count) * (
        count * grad_norm - grad_norm.sum(axis=axes) - cache.normalized * (grad_norm * cache.normalized).sum(axis=axes)
    )
    grads = BatchNormState(
        gamma=grad_gamma,
        beta=grad_beta,
        running_mean=np.zeros_like(state.running_mean),
        running_var=np.zeros_like(state.running_var),
        epsilon=state.epsilon,
        momentum=state.momentum,
        mode=state.mode,
    )
    return grad_images, grads


def relu(images: Tensor) -> Tensor:
    return np.maximum(images, 0)


def relu_backward(grad_output: Tensor, images: Tensor) -> Tensor:
    return grad_output * (images > 0)


def global_avg_pool(images: Tensor) -> Tensor:
    require_rank(images, 4, "global_avg_pool")
    return images.mean(axis=(1, 2))


def global_avg_pool_backward(grad_output: Tensor, input_shape: Tuple[int, int, int, int]) -> Tensor:
    n, height, width, channels = input_shape
    scaled = grad_output / (height * width)
    return np.broadcast_to(scaled[:, None, None, :], (n, height, width, channels)).copy()


def dense_forward(features: Tensor, layer: DenseLayer) -> Tensor:
    require_rank(features, 2, "dense_forward")
    if features.shape[1] != layer.weights.shape[0]:
        raise ShapeError(f"dense_forward: {features.shape[1]} features, layer expects {layer.weights.shape[0]}")
    return matmul(features, layer.weights) + layer.bias


def dense_backward(grad_output: Tensor, features: Tensor, layer: DenseLayer) -> Tuple[Tensor, DenseLayer]:
    grads = DenseLayer(weights=matmul(features.T, grad_output), bias=grad_output.sum(axis=0))
    return matmul(grad_output, layer.weights.T), grads
