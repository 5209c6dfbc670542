"""Input-dependent combining weights.

A small network g maps the layer input to per-example, per-position logits
(N x H x W x K): a 1x1 projection, parallel branches of average pooling +
dilated depthwise 3x3 convolution + bilinear resize, channel concatenation,
a ReLU bottleneck, a ReLU expansion and a linear 1x1 head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ShapeError
from .layers import LocalLayer, SpatialBias, he_uniform, relu, relu_backward, spatial_bias_add, spatial_bias_backward
from .lowrank import (
    FilterBasis,
    check_rank_fits,
    basis_responses,
    basis_responses_backward,
    mix_responses,
    normalize_weights,
    normalize_weights_backward,
)
from .specs import WeightNetConfig
from .tensor_ops import Tensor, default_dtype, ensure_finite, matmul, require_rank


@dataclass
class PointwiseConv:
    """1 x 1 convolution inside the weight network."""

    weights: Tensor  # Cin x Cout
    bias: Tensor

    @classmethod
    def initialize(cls, in_channels: int, out_channels: int, rng: np.random.Generator) -> "PointwiseConv":
        weights = he_uniform((in_channels, out_channels), in_channels, rng)
        return cls(weights=weights, bias=np.zeros(out_channels, dtype=weights.dtype))


@dataclass
class MultiscaleBranch:
    """Pool, depthwise convolve, then upsample back to the input extent."""

    depthwise: Tensor  # 3 x 3 x P
    bias: Tensor  # P
    pool_window: int = field(default=1, metadata={"trainable": False})
    dilation: int = field(default=1, metadata={"trainable": False})


@dataclass
class DynamicWeightNet:
    """Predicts per-example combining logits from the layer input."""

    projection: PointwiseConv
    branches: List[MultiscaleBranch]
    bottleneck: PointwiseConv
    expansion: PointwiseConv
    head: PointwiseConv

    @property
    def rank(self) -> int:
        return int(self.head.weights.shape[1])

    @property
    def in_channels(self) -> int:
        return int(self.projection.weights.shape[0])

    @classmethod
    def initialize(
        cls, in_channels: int, rank: int, rng: np.random.Generator, config: Optional[WeightNetConfig] = None
    ) -> "DynamicWeightNet":
        config = config or WeightNetConfig()
        width = config.projection_channels
        branches = [
            MultiscaleBranch(
                depthwise=he_uniform((3, 3, width), 9, rng),
                bias=np.zeros(width, dtype=default_dtype()),
                pool_window=window,
                dilation=dilation,
            )
            for window, dilation in config.branches
        ]
        return cls(
            projection=PointwiseConv.initialize(in_channels, width, rng),
            branches=branches,
            bottleneck=PointwiseConv.initialize(width * len(branches), config.bottleneck_channels, rng),
            expansion=PointwiseConv.initialize(config.bottleneck_channels, config.expansion_channels, rng),
            head=PointwiseConv.initialize(config.expansion_channels, rank, rng),
        )


@dataclass
class DynamicLrlcLayer:
    """Filter basis mixed by weights that the weight network predicts per example."""

    basis: FilterBasis
    weight_net: DynamicWeightNet
    bias: SpatialBias

    def __post_init__(self) -> None:
        if self.weight_net.rank != self.basis.rank:
            raise ShapeError(f"DynamicLrlcLayer: weight net rank {self.weight_net.rank} != basis rank {self.basis.rank}")
        check_rank_fits(self.basis.rank, *self.extent, "DynamicLrlcLayer")

    @property
    def extent(self) -> Tuple[int, int]:
        return self.bias.shape[0], self.bias.shape[1]


@dataclass
class _BranchCache:
    pooled: Tensor
    padded: Tensor


@dataclass
class WeightNetCache:
    images: Tensor
    projected: Tensor
    branches: List[_BranchCache]
    concatenated: Tensor
    bottleneck_pre: Tensor
    bottleneck: Tensor
    expansion_pre: Tensor
    expansion: Tensor


@dataclass
class DynamicLrlcCache:
    """Forward intermediates of the layer and of its weight network."""

    patches: Tensor
    basis_outputs: Tensor
    weights: Tensor  # N x H x W x K
    net: WeightNetCache


def pointwise_forward(images: Tensor, conv: PointwiseConv) -> Tensor:
    n, height, width, channels = images.shape
    if channels != conv.weights.shape[0]:
        raise ShapeError(f"pointwise conv: input has {channels} channels, expects {conv.weights.shape[0]}")
    flat = matmul(images.reshape(-1, channels), conv.weights) + conv.bias
    return flat.reshape(n, height, width, -1)


def pointwise_backward(grad_output: Tensor, images: Tensor, conv: PointwiseConv) -> Tuple[Tensor, PointwiseConv]:
    channels = images.shape[3]
    grad_flat = grad_output.reshape(-1, grad_output.shape[3])
    grads = PointwiseConv(
        weights=matmul(images.reshape(-1, channels).T, grad_flat),
        bias=grad_flat.sum(axis=0),
    )
    return matmul(grad_flat, conv.weights.T).reshape(images.shape), grads


def _pool_counts(height: int, width: int, window: int) -> Tensor:
    rows = np.minimum(window, height - np.arange(0, height, window))
    cols = np.minimum(window, width - np.arange(0, width, window))
    return np.outer(rows, cols).astype(np.float64)


def average_pool(images: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling; ragged edge windows average their valid cells."""

    if window == 1:
        return images
    n, height, width, channels = images.shape
    out_h, out_w = math.ceil(height / window), math.ceil(width / window)
    padded = np.zeros((n, out_h * window, out_w * window, channels), dtype=images.dtype)
    padded[:, :height, :width] = images
    sums = padded.reshape(n, out_h, window, out_w, window, channels).sum(axis=(2, 4))
    counts = _pool_counts(height, width, window).astype(images.dtype)
    return sums / counts[None, :, :, None]


def average_pool_backward(grad_output: Tensor, input_shape: Tuple[int, int, int, int], window: int) -> Tensor:
    if window == 1:
        return grad_output
    _, height, width, _ = input_shape
    counts = _pool_counts(height, width, window).astype(grad_output.dtype)
    scaled = grad_output / counts[None, :, :, None]
    expanded = np.repeat(np.repeat(scaled, window, axis=1), window, axis=2)
    return np.ascontiguousarray(expanded[:, :height, :width])


def depthwise_forward(images: Tensor, kernel: Tensor, bias: Tensor, dilation: int) -> Tuple[Tensor, Tensor]:
    """3x3 depthwise convolution, SAME padding, given dilation; returns (output, padded input)."""

    _, height, width, _ = images.shape
    padded = np.pad(images, ((0, 0), (dilation, dilation), (dilation, dilation), (0, 0)))
    out = np.zeros_like(images)
    for dy in range(3):
        for dx in range(3):
            window = padded[:, dy * dilation : dy * dilation + height, dx * dilation : dx * dilation + width]
            out += window * kernel[dy, dx]
    return out + bias, padded


def depthwise_backward(
    grad_output: Tensor, padded: Tensor, kernel: Tensor, dilation: int
) -> Tuple[Tensor, Tensor, Tensor]:
    _, height, width, _ = grad_output.shape
    grad_padded = np.zeros_like(padded)
    grad_kernel = np.zeros_like(kernel)
    for dy in range(3):
        for dx in range(3):
            rows = slice(dy * dilation, dy * dilation + height)
            cols = slice(dx * dilation, dx * dilation + width)
            grad_kernel[dy, dx] = (grad_output * padded[:, rows, cols]).sum(axis=(0, 1, 2))
            grad_padded[:, rows, cols] += grad_output * kernel[dy, dx]
    grad_images = grad_padded[:, dilation : dilation + height, dilation : dilation + width]
    return grad_images, grad_kernel, grad_output.sum(axis=(0, 1, 2))


def interpolation_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Row i holds the 1-D linear weights of output i (align_corners=False)."""

    matrix = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for index in range(out_size):
        source = max((index + 0.5) * scale - 0.5, 0.0)
        low = min(int(np.floor(source)), in_size - 1)
        high = min(low + 1, in_size - 1)
        frac = source - low
        matrix[index, low] += 1.0 - frac
        matrix[index, high] += frac
    return matrix


def bilinear_resize(images: Tensor, height: int, width: int) -> Tensor:
    """Separable bilinear resize with half-pixel centres; same-size calls return a copy."""

    require_rank(images, 4, "bilinear_resize")
    if height < 1 or width < 1:
        raise ConfigurationError(f"bilinear_resize: target extent must be positive, got {height}x{width}")
    if images.shape[1] < 1 or images.shape[2] < 1:
        raise ShapeError(f"bilinear_resize: empty input extent {images.shape[1:3]}")
    if images.shape[1:3] == (height, width):
        return images.copy()
    rows = interpolation_matrix(height, images.shape[1]).astype(images.dtype)
    cols = interpolation_matrix(width, images.shape[2]).astype(images.dtype)
    return np.einsum("Hh,nhwc,Ww->nHWc", rows, images, cols, optimize=False)


def bilinear_resize_backward(grad_output: Tensor, input_shape: Tuple[int, int, int, int]) -> Tensor:
    _, in_h, in_w, _ = input_shape
    height, width = grad_output.shape[1:3]
    if (in_h, in_w) == (height, width):
        return grad_output
    rows = interpolation_matrix(height, in_h).astype(grad_output.dtype)
    cols = interpolation_matrix(width, in_w).astype(grad_output.dtype)
    return np.einsum("Hh,nHWc,Ww->nhwc", rows, grad_output, cols, optimize=False)


def predict_logits(net: DynamicWeightNet, images: Tensor, *, return_cache: bool = False):
    """Per-example combining-weight logits, N x H x W x K."""

    require_rank(images, 4, "predict_logits")
    if images.shape[3] != net.in_channels:
        raise ShapeError(f"predict_logits: input has {images.shape[3]} channels, projection expects {net.in_channels}")
    _, height, width, _ = images.shape
    projected = pointwise_forward(images, net.projection)
    resized = []
    caches = []
    for branch in net.branches:
        pooled = average_pool(projected, branch.pool_window)
        filtered, padded = depthwise_forward(pooled, branch.depthwise, branch.bias, branch.dilation)
        resized.append(bilinear_resize(filtered, height, width))
        caches.append(_BranchCache(pooled=pooled, padded=padded))
    concatenated = np.concatenate(resized, axis=3)
    bottleneck_pre = pointwise_forward(concatenated, net.bottleneck)
    bottleneck = relu(bottleneck_pre)
    expansion_pre = pointwise_forward(bottleneck, net.expansion)
    expansion = relu(expansion_pre)
    logits = pointwise_forward(expansion, net.head)
    if not return_cache:
        return logits
    cache = WeightNetCache(
        images=images,
        projected=projected,
        branches=caches,
        concatenated=concatenated,
        bottleneck_pre=bottleneck_pre,
        bottleneck=bottleneck,
        expansion_pre=expansion_pre,
        expansion=expansion,
    )
    return logits, cache


def weight_net_backward(
    grad_logits: Tensor, net: DynamicWeightNet, cache: WeightNetCache
) -> Tuple[Tensor, DynamicWeightNet]:
    grad_expansion, head_grads = pointwise_backward(grad_logits, cache.expansion, net.head)
    grad_expansion_pre = relu_backward(grad_expansion, cache.expansion_pre)
    grad_bottleneck, expansion_grads = pointwise_backward(grad_expansion_pre, cache.bottleneck, net.expansion)
    grad_bottleneck_pre = relu_backward(grad_bottleneck, cache.bottleneck_pre)
    grad_concat, bottleneck_grads = pointwise_backward(grad_bottleneck_pre, cache.concatenated, net.bottleneck)

    width = net.projection.weights.shape[1]
    grad_projected = np.zeros_like(cache.projected)
    branch_grads = []
    for index, (branch, branch_cache) in enumerate(zip(net.branches, cache.branches)):
        grad_resized = grad_concat[..., index * width : (index + 1) * width]
        grad_filtered = bilinear_resize_backward(grad_resized, branch_cache.pooled.shape)
        grad_pooled, grad_kernel, grad_bias = depthwise_backward(
            grad_filtered, branch_cache.padded, branch.depthwise, branch.dilation
        )
        grad_projected += average_pool_backward(grad_pooled, cache.projected.shape, branch.pool_window)
        branch_grads.append(MultiscaleBranch(grad_kernel, grad_bias, branch.pool_window, branch.dilation))

    grad_images, projection_grads = pointwise_backward(grad_projected, cache.images, net.projection)
    grads = DynamicWeightNet(
        projection=projection_grads,
        branches=branch_grads,
        bottleneck=bottleneck_grads,
        expansion=expansion_grads,
        head=head_grads,
    )
    return grad_images, grads


def dynamic_lrlc_forward(images: Tensor, layer: DynamicLrlcLayer, *, return_cache: bool = False):
    """Per example: softmax(g(I)) mixes the basis responses, then the spatial bias is added."""

    require_rank(images, 4, "dynamic_lrlc_forward")
    if images.shape[1:3] != layer.extent:
        raise ShapeError(f"dynamic_lrlc_forward: input extent {images.shape[1:3]} != layer extent {layer.extent}")
    if images.shape[3] != layer.basis.in_channels:
        raise ShapeError(
            f"dynamic_lrlc_forward: input has {images.shape[3]} channels, basis expects {layer.basis.in_channels}"
        )
    n, height, width, _ = images.shape
    logits, net_cache = predict_logits(layer.weight_net, images, return_cache=True)
    weights = normalize_weights(logits)
    patches, responses = basis_responses(images, layer.basis)
    mixed = mix_responses(responses, weights.reshape(n, height * width, -1))
    out = ensure_finite(spatial_bias_add(mixed.reshape(n, height, width, -1), layer.bias), "dynamic_lrlc_forward")
    if return_cache:
        return out, DynamicLrlcCache(patches=patches, basis_outputs=responses, weights=weights, net=net_cache)
    return out


def dynamic_lrlc_backward(
    grad_output: Tensor, images: Tensor, layer: DynamicLrlcLayer, cache: Optional[DynamicLrlcCache] = None
) -> Tuple[Tensor, DynamicLrlcLayer]:
    n, height, width, _ = images.shape
    if cache is None:
        _, cache = dynamic_lrlc_forward(images, layer, return_cache=True)
    flat_weights = cache.weights.reshape(n, height * width, -1)
    grad_mixed = grad_output.reshape(n, height * width, -1)
    grad_responses = grad_mixed[:, :, None, :] * flat_weights[:, :, :, None]
    grad_weights = np.einsum("npc,npkc->npk", grad_mixed, cache.basis_outputs, optimize=False)
    grad_logits = normalize_weights_backward(grad_weights.reshape(cache.weights.shape), cache.weights)
    grad_from_net, net_grads = weight_net_backward(grad_logits, layer.weight_net, cache.net)
    grad_from_basis, basis_grads = basis_responses_backward(grad_responses, images, layer.basis, cache.patches)
    grads = DynamicLrlcLayer(basis=basis_grads, weight_net=net_grads, bias=spatial_bias_backward(grad_output, layer.bias))
    return grad_from_net + grad_from_basis, grads


def dynamic_weights(layer: DynamicLrlcLayer, images: Tensor) -> Tensor:
    """Normalized per-example weights, N x H x W x K."""

    return normalize_weights(predict_logits(layer.weight_net, images))


def lower_dynamic_example(layer: DynamicLrlcLayer, example: Tensor) -> LocalLayer:
    """Materialize the per-position banks implied by one input example."""

    if example.ndim == 3:
        example = example[None]
    if example.shape[0] != 1:
        raise ShapeError(f"lower_dynamic_example: expected a single example, got batch of {example.shape[0]}")
    weights = dynamic_weights(layer, example)[0]
    filters = np.einsum("ijk,kabcd->ijabcd", weights, layer.basis.banks, optimize=False)
    return LocalLayer(
        filters=np.ascontiguousarray(filters),
        bias=np.zeros(layer.basis.out_channels, dtype=filters.dtype),
        spatial_bias=layer.bias.copy(),
    )


def weight_net_macs(
    height: int, width: int, in_channels: int, rank: int, config: Optional[WeightNetConfig] = None
) -> int:
    """Multiply-accumulates of one forward pass of g for a single example."""

    config = config or WeightNetConfig()
    width_p = config.projection_channels
    macs = height * width * in_channels * width_p
    for window, _ in config.branches:
        macs += math.ceil(height / window) * math.ceil(width / window) * 9 * width_p
    macs += height * width * width_p * len(config.branches) * config.bottleneck_channels
    macs += height * width * config.bottleneck_channels * config.expansion_channels
    macs += height * width * config.expansion_channels * rank
    return macs


def weight_net_params(in_channels: int, rank: int, config: Optional[WeightNetConfig] = None) -> int:
    config = config or WeightNetConfig()
    width_p = config.projection_channels
    params = in_channels * width_p + width_p
    params += len(config.branches) * (9 * width_p + width_p)
    params += width_p * len(config.branches) * config.bottleneck_channels + config.bottleneck_channels
    params += config.bottleneck_channels * config.expansion_channels + config.expansion_channels
    params += config.expansion_channels * rank + rank
    return params

