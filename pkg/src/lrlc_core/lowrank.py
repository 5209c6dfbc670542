"""Low-rank locally connected layer with fixed combining weights.

The layer mixes K basis filter banks with per-position weights
w[i, j, k] = softmax_k(alpha[k, i] + beta[k, j]) and adds a row + column +
channel bias. Training evaluates the K convolutions and a weighted sum; for
inference the implied per-position banks can be materialized into a
``LocalLayer``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ShapeError
from .layers import LocalLayer, SpatialBias, he_uniform, spatial_bias_add, spatial_bias_backward
from .tensor_ops import (
    Tensor,
    check_filter_size,
    default_dtype,
    ensure_finite,
    extract_patches,
    fold_patches,
    matmul,
    named_arrays,
    require_rank,
)

logger = logging.getLogger(__name__)


class WeightsMode(str, Enum):
    FACTORIZED = "factorized"
    FULL = "full"


class InitMode(str, Enum):
    STRUCTURED = "structured"
    RANDOM = "random"


@dataclass
class FilterBasis:
    """K filter banks shared by every position of a layer."""

    banks: Tensor  # K x h x w x Cin x Cout

    def __post_init__(self) -> None:
        require_rank(self.banks, 5, "FilterBasis.banks")
        if self.banks.shape[0] < 1:
            raise ConfigurationError("FilterBasis: spatial rank K must be at least 1")
        check_filter_size(self.banks.shape[1], self.banks.shape[2])

    @property
    def rank(self) -> int:
        return int(self.banks.shape[0])

    @property
    def filter_shape(self) -> Tuple[int, int]:
        return int(self.banks.shape[1]), int(self.banks.shape[2])

    @property
    def in_channels(self) -> int:
        return int(self.banks.shape[3])

    @property
    def out_channels(self) -> int:
        return int(self.banks.shape[4])


def check_rank_fits(rank: int, height: int, width: int, owner: str) -> None:
    """K basis banks can be mixed at H x W positions only while K <= H * W."""

    if rank > height * width:
        raise ConfigurationError(
            f"{owner}: spatial rank {rank} exceeds the {height} x {width} = {height * width} positions"
        )


@dataclass
class CombiningWeights:
    """Pre-softmax combining weights.

    Factorized mode stores ``alpha`` (K x H) and ``beta`` (K x W); full mode
    stores the logit table ``full`` (H x W x K) directly.
    """

    alpha: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    full: Optional[Tensor] = None
    mode: WeightsMode = WeightsMode.FACTORIZED

    @property
    def rank(self) -> int:
        if self.mode == WeightsMode.FULL:
            return int(self.full.shape[2])
        return int(self.alpha.shape[0])


@dataclass
class LrlcLayer:
    """Filter basis, input-independent combining weights and a spatial bias."""

    basis: FilterBasis
    weights: CombiningWeights
    bias: SpatialBias

    def __post_init__(self) -> None:
        if self.weights.rank != self.basis.rank:
            raise ShapeError(f"LrlcLayer: weights rank {self.weights.rank} != basis rank {self.basis.rank}")
        check_rank_fits(self.basis.rank, *self.extent, "LrlcLayer")

    @property
    def extent(self) -> Tuple[int, int]:
        return self.bias.shape[0], self.bias.shape[1]

    @classmethod
    def empty(
        cls,
        height: int,
        width: int,
        filter_size: int,
        in_channels: int,
        out_channels: int,
        rank: int,
        mode: WeightsMode = WeightsMode.FACTORIZED,
    ) -> "LrlcLayer":
        """Zero-filled layer of the given geometry, ready for an ``init_*`` call."""

        if rank < 1:
            raise ConfigurationError(f"LrlcLayer: spatial rank must be at least 1, got {rank}")
        dtype = default_dtype()
        basis = FilterBasis(np.zeros((rank, filter_size, filter_size, in_channels, out_channels), dtype))
        if mode == WeightsMode.FULL:
            weights = CombiningWeights(full=np.zeros((height, width, rank), dtype), mode=mode)
        else:
            weights = CombiningWeights(alpha=np.zeros((rank, height), dtype), beta=np.zeros((rank, width), dtype))
        bias = SpatialBias.zeros(height, width, out_channels, dtype, full=mode == WeightsMode.FULL)
        return cls(basis=basis, weights=weights, bias=bias)


@dataclass
class LrlcCache:
    """Patches, per-bank responses and normalized weights kept for the backward pass."""

    patches: Tensor
    basis_outputs: Tensor  # N x HW x K x Cout
    weights: Tensor  # H x W x K, normalized


def combine_logits(weights: CombiningWeights, height: int, width: int) -> Tensor:
    """Pre-softmax table H x W x K: alpha[k, i] + beta[k, j] or the stored full table."""

    if weights.mode == WeightsMode.FULL:
        if weights.full is None or weights.full.shape[:2] != (height, width):
            shape = None if weights.full is None else weights.full.shape
            raise ShapeError(f"combine_logits: full table {shape} does not match extent {(height, width)}")
        return weights.full
    if weights.alpha is None or weights.beta is None:
        raise ConfigurationError("combine_logits: factorized weights need alpha and beta")
    if weights.alpha.shape[1] != height or weights.beta.shape[1] != width:
        raise ShapeError(
            f"combine_logits: alpha {weights.alpha.shape} / beta {weights.beta.shape} do not match {(height, width)}"
        )
    return weights.alpha.T[:, None, :] + weights.beta.T[None, :, :]


def normalize_weights(logits: Tensor) -> Tensor:
    """Softmax over the last (rank) axis, max-subtracted."""

    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def normalize_weights_backward(grad_weights: Tensor, weights: Tensor) -> Tensor:
    return weights * (grad_weights - (grad_weights * weights).sum(axis=-1, keepdims=True))


def normalized_weights(layer: LrlcLayer) -> Tensor:
    height, width = layer.extent
    return normalize_weights(combine_logits(layer.weights, height, width))


def combine_logits_backward(grad_logits: Tensor, weights: CombiningWeights) -> CombiningWeights:
    if weights.mode == WeightsMode.FULL:
        return CombiningWeights(full=grad_logits, mode=WeightsMode.FULL)
    return CombiningWeights(alpha=grad_logits.sum(axis=1).T, beta=grad_logits.sum(axis=0).T)


def _check_input(images: Tensor, layer: LrlcLayer) -> None:
    require_rank(images, 4, "lrlc_forward")
    if images.shape[1:3] != layer.extent:
        raise ShapeError(f"lrlc_forward: input extent {images.shape[1:3]} != layer extent {layer.extent}")
    if images.shape[3] != layer.basis.in_channels:
        raise ShapeError(
            f"lrlc_forward: input has {images.shape[3]} channels, basis expects {layer.basis.in_channels}"
        )


def basis_responses(images: Tensor, basis: FilterBasis, patches: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """All K convolutions in one product; returns (patches, N x HW x K x Cout)."""

    n, height, width, _ = images.shape
    fh, fw = basis.filter_shape
    if patches is None:
        patches = extract_patches(images, fh, fw)
    stacked = basis.banks.transpose(1, 2, 3, 0, 4).reshape(fh * fw * basis.in_channels, -1)
    responses = matmul(patches.reshape(n * height * width, -1), stacked)
    return patches, responses.reshape(n, height * width, basis.rank, basis.out_channels)


def basis_responses_backward(
    grad_responses: Tensor, images: Tensor, basis: FilterBasis, patches: Tensor
) -> Tuple[Tensor, FilterBasis]:
    n, height, width, _ = images.shape
    fh, fw = basis.filter_shape
    rows = n * height * width
    stacked = basis.banks.transpose(1, 2, 3, 0, 4).reshape(fh * fw * basis.in_channels, -1)
    grad_flat = grad_responses.reshape(rows, -1)
    grad_stacked = matmul(patches.reshape(rows, -1).T, grad_flat)
    grad_banks = grad_stacked.reshape(fh, fw, basis.in_channels, basis.rank, basis.out_channels).transpose(3, 0, 1, 2, 4)
    grad_cols = matmul(grad_flat, stacked.T).reshape(patches.shape)
    return fold_patches(grad_cols, images.shape, fh, fw), FilterBasis(np.ascontiguousarray(grad_banks))


def mix_responses(responses: Tensor, weights: Tensor) -> Tensor:
    """Sum_k w[., p, k] * O_k[., p, :]; weights are HW x K or N x HW x K."""

    if weights.ndim == 2:
        return np.einsum("npkc,pk->npc", responses, weights, optimize=False)
    return np.einsum("npkc,npk->npc", responses, weights, optimize=False)


def lrlc_forward(images: Tensor, layer: LrlcLayer, *, return_cache: bool = False):
    """O = sum_k W(k) * (I conv F(k)) + B with softmax-normalized W."""

    _check_input(images, layer)
    n, height, width, _ = images.shape
    weights = normalized_weights(layer)
    patches, responses = basis_responses(images, layer.basis)
    mixed = mix_responses(responses, weights.reshape(height * width, -1))
    out = ensure_finite(spatial_bias_add(mixed.reshape(n, height, width, -1), layer.bias), "lrlc_forward")
    if return_cache:
        return out, LrlcCache(patches=patches, basis_outputs=responses, weights=weights)
    return out


def lrlc_backward(
    grad_output: Tensor, images: Tensor, layer: LrlcLayer, cache: Optional[LrlcCache] = None
) -> Tuple[Tensor, LrlcLayer]:
    """Gradients for the input, basis, combining weights and the three bias vectors."""

    n, height, width, _ = images.shape
    if cache is None:
        _, cache = lrlc_forward(images, layer, return_cache=True)
    flat_weights = cache.weights.reshape(height * width, -1)
    grad_mixed = grad_output.reshape(n, height * width, -1)
    grad_responses = grad_mixed[:, :, None, :] * flat_weights[None, :, :, None]
    grad_flat_weights = np.einsum("npc,npkc->pk", grad_mixed, cache.basis_outputs, optimize=False)
    grad_logits = normalize_weights_backward(grad_flat_weights.reshape(cache.weights.shape), cache.weights)
    grad_images, grad_basis = basis_responses_backward(grad_responses, images, layer.basis, cache.patches)
    grads = LrlcLayer(
        basis=grad_basis,
        weights=combine_logits_backward(grad_logits, layer.weights),
        bias=spatial_bias_backward(grad_output, layer.bias),
    )
    return grad_images, grads


def lower_to_local(layer: LrlcLayer) -> LocalLayer:
    """Materialize F(i, j) = sum_k w[i, j, k] F(k); the spatial bias is carried unchanged."""

    weights = normalized_weights(layer)
    if not np.all(np.isfinite(weights)):
        raise ConfigurationError("lower_to_local: combining weights are not finite")
    filters = np.einsum("ijk,kabcd->ijabcd", weights, layer.basis.banks, optimize=False)
    return LocalLayer(
        filters=np.ascontiguousarray(filters),
        bias=np.zeros(layer.basis.out_channels, dtype=filters.dtype),
        spatial_bias=layer.bias.copy(),
    )


def _init_basis_and_bias(layer: LrlcLayer, rng: np.random.Generator) -> None:
    fh, fw = layer.basis.filter_shape
    fan_in = fh * fw * layer.basis.in_channels
    layer.basis.banks[...] = he_uniform(layer.basis.banks.shape, fan_in, rng, layer.basis.banks.dtype)
    for array in named_arrays(layer.bias).values():
        array[...] = 0


def init_structured(layer: LrlcLayer, rng: np.random.Generator) -> LrlcLayer:
    """Every logit set to 1/sqrt(K): uniform mixing, i.e. a random convolution."""

    _init_basis_and_bias(layer, rng)
    constant = 1.0 / np.sqrt(layer.basis.rank)
    if layer.weights.mode == WeightsMode.FULL:
        layer.weights.full[...] = constant
    else:
        layer.weights.alpha[...] = constant
        layer.weights.beta[...] = 0
    return layer


def init_random(layer: LrlcLayer, rng: np.random.Generator) -> LrlcLayer:
    """Unstructured variant: i.i.d. standard normal combining-weight logits."""

    _init_basis_and_bias(layer, rng)
    if layer.weights.mode == WeightsMode.FULL:
        layer.weights.full[...] = rng.standard_normal(layer.weights.full.shape)
    else:
        layer.weights.alpha[...] = rng.standard_normal(layer.weights.alpha.shape)
        layer.weights.beta[...] = rng.standard_normal(layer.weights.beta.shape)
    return layer


def initialize(layer: LrlcLayer, rng: np.random.Generator, mode: InitMode = InitMode.STRUCTURED) -> LrlcLayer:
    if mode == InitMode.RANDOM:
        return init_random(layer, rng)
    return init_structured(layer, rng)
