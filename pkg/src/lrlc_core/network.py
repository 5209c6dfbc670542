"""Trainable module wrappers and the sequential classifier built from a ModelSpec.

Modules keep the forward cache of the last training-mode call so ``backward``
can run without recomputation. A network is owned by a single training
thread; inference-mode forwards do not touch the caches.
"""

from __future__ import annotations

import copy
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dynamic import (
    DynamicLrlcCache,
    DynamicLrlcLayer,
    DynamicWeightNet,
    dynamic_lrlc_backward,
    dynamic_lrlc_forward,
    dynamic_weights,
)
from .errors import ConfigurationError, ShapeError, UnsupportedOperationError
from .layers import (
    BatchNormCache,
    BatchNormState,
    ConvLayer,
    DenseLayer,
    LocalLayer,
    Phase,
    SpatialBias,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    coordconv_augment,
    coordconv_backward,
    dense_backward,
    dense_forward,
    global_avg_pool,
    global_avg_pool_backward,
    he_uniform,
    local_backward,
    local_forward,
    relu,
    relu_backward,
)
from .lowrank import (
    FilterBasis,
    LrlcCache,
    LrlcLayer,
    initialize,
    lower_to_local,
    lrlc_backward,
    lrlc_forward,
    normalized_weights,
)
from .specs import Head, LayerKind, ModelSpec
from .tensor_ops import Tensor, as_tensor, ensure_finite, extract_patches, named_arrays

logger = logging.getLogger(__name__)


class Module:
    """Base class: ``params`` is a parameter dataclass (or None for stateless modules)."""

    name = "module"

    def __init__(self, params=None) -> None:
        self.params = params
        self.grads = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        raise NotImplementedError

    def backward(self, grad_output: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> Dict[str, np.ndarray]:
        return {} if self.params is None else named_arrays(self.params)

    def gradients(self) -> Dict[str, np.ndarray]:
        if self.params is None:
            return {}
        if self.grads is None:
            raise ConfigurationError(f"{self.name}: backward has not been run")
        return named_arrays(self.grads)

    def state(self) -> Dict[str, np.ndarray]:
        return {} if self.params is None else named_arrays(self.params, trainable_only=False)

    def _require_cache(self, cache):
        if cache is None:
            raise ConfigurationError(f"{self.name}: backward called without a training-mode forward")
        return cache


class Conv(Module):
    name = "conv"

    def __init__(self, params: ConvLayer) -> None:
        super().__init__(params)
        self._cache: Optional[Tuple[Tensor, Tensor]] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        fh, fw = self.params.filters.shape[:2]
        patches = extract_patches(inputs, fh, fw)
        if training:
            self._cache = (inputs, patches)
        return conv2d_forward(inputs, self.params, patches)

    def backward(self, grad_output: Tensor) -> Tensor:
        inputs, patches = self._require_cache(self._cache)
        grad_inputs, self.grads = conv2d_backward(grad_output, inputs, self.params, patches)
        return grad_inputs


class CoordConv(Conv):
    """Convolution over the input with (row, column) coordinate channels appended."""

    name = "coordconv"

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        return super().forward(coordconv_augment(inputs), training=training)

    def backward(self, grad_output: Tensor) -> Tensor:
        return coordconv_backward(super().backward(grad_output))


class Local(Module):
    name = "local"

    def __init__(self, params: LocalLayer) -> None:
        super().__init__(params)
        self._cache: Optional[Tuple[Tensor, Tensor]] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        fh, fw = self.params.filters.shape[2:4]
        patches = extract_patches(inputs, fh, fw)
        if training:
            self._cache = (inputs, patches)
        return local_forward(inputs, self.params, patches)

    def backward(self, grad_output: Tensor) -> Tensor:
        inputs, patches = self._require_cache(self._cache)
        grad_inputs, self.grads = local_backward(grad_output, inputs, self.params, patches)
        return grad_inputs


class Lrlc(Module):
    name = "lrlc"

    def __init__(self, params: LrlcLayer) -> None:
        super().__init__(params)
        self._cache: Optional[Tuple[Tensor, LrlcCache]] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        if not training:
            return lrlc_forward(inputs, self.params)
        out, cache = lrlc_forward(inputs, self.params, return_cache=True)
        self._cache = (inputs, cache)
        return out

    def backward(self, grad_output: Tensor) -> Tensor:
        inputs, cache = self._require_cache(self._cache)
        grad_inputs, self.grads = lrlc_backward(grad_output, inputs, self.params, cache)
        return grad_inputs

    def combining_weights(self, inputs: Optional[Tensor] = None) -> Tensor:
        return normalized_weights(self.params)


class DynamicLrlc(Module):
    name = "dynamic_lrlc"

    def __init__(self, params: DynamicLrlcLayer) -> None:
        super().__init__(params)
        self._cache: Optional[Tuple[Tensor, DynamicLrlcCache]] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        if not training:
            return dynamic_lrlc_forward(inputs, self.params)
        out, cache = dynamic_lrlc_forward(inputs, self.params, return_cache=True)
        self._cache = (inputs, cache)
        return out

    def backward(self, grad_output: Tensor) -> Tensor:
        inputs, cache = self._require_cache(self._cache)
        grad_inputs, self.grads = dynamic_lrlc_backward(grad_output, inputs, self.params, cache)
        return grad_inputs

    def combining_weights(self, inputs: Optional[Tensor] = None) -> Tensor:
        """Per-example weights N x H x W x K for the given layer inputs."""

        if inputs is None:
            raise ConfigurationError("dynamic_lrlc: combining weights depend on the input; pass the layer inputs")
        return dynamic_weights(self.params, inputs)


class BatchNorm(Module):
    name = "batchnorm"

    def __init__(self, params: BatchNormState) -> None:
        super().__init__(params)
        self._cache: Optional[BatchNormCache] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        self.params.mode = Phase.TRAIN if training else Phase.INFERENCE
        out, cache = batchnorm_forward(inputs, self.params)
        if training:
            self._cache = cache
        return out

    def backward(self, grad_output: Tensor) -> Tensor:
        grad_inputs, self.grads = batchnorm_backward(grad_output, self._require_cache(self._cache), self.params)
        return grad_inputs


class Relu(Module):
    name = "relu"

    def __init__(self) -> None:
        super().__init__()
        self._inputs: Optional[Tensor] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        if training:
            self._inputs = inputs
        return relu(inputs)

    def backward(self, grad_output: Tensor) -> Tensor:
        return relu_backward(grad_output, self._require_cache(self._inputs))


class GlobalPool(Module):
    name = "global_pool"

    def __init__(self) -> None:
        super().__init__()
        self._shape: Optional[Tuple[int, int, int, int]] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        if training:
            self._shape = inputs.shape
        return global_avg_pool(inputs)

    def backward(self, grad_output: Tensor) -> Tensor:
        return global_avg_pool_backward(grad_output, self._require_cache(self._shape))


class Flatten(Module):
    name = "flatten"

    def __init__(self) -> None:
        super().__init__()
        self._shape: Optional[Tuple[int, ...]] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        if training:
            self._shape = inputs.shape
        return inputs.reshape(inputs.shape[0], -1)

    def backward(self, grad_output: Tensor) -> Tensor:
        return grad_output.reshape(self._require_cache(self._shape))


class Dense(Module):
    name = "dense"

    def __init__(self, params: DenseLayer) -> None:
        super().__init__(params)
        self._inputs: Optional[Tensor] = None

    def forward(self, inputs: Tensor, *, training: bool) -> Tensor:
        if training:
            self._inputs = inputs
        return dense_forward(inputs, self.params)

    def backward(self, grad_output: Tensor) -> Tensor:
        grad_inputs, self.grads = dense_backward(grad_output, self._require_cache(self._inputs), self.params)
        return grad_inputs


class Network:
    """Feature layers (each followed by batchnorm and ReLU), then the classification head."""

    def __init__(self, spec: ModelSpec, modules: List[Module], *, lowered: bool = False) -> None:
        self.spec = spec
        self.modules = modules
        self.lowered_from_lrlc = lowered

    def forward(self, images: Tensor, *, training: bool = False) -> Tensor:
        expected = (self.spec.input_height, self.spec.input_width, self.spec.input_channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"network expects N x {expected[0]} x {expected[1]} x {expected[2]}, got {images.shape}")
        activations = as_tensor(images)
        for module in self.modules:
            activations = module.forward(activations, training=training)
        return ensure_finite(activations, "network forward")

    def backward(self, grad_logits: Tensor) -> Tensor:
        grad = grad_logits
        for module in reversed(self.modules):
            grad = module.backward(grad)
        return grad

    def _named(self, getter) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for index, module in enumerate(self.modules):
            for key, value in getter(module).items():
                arrays[f"{index:02d}.{module.name}.{key}"] = value
        return arrays

    def parameters(self) -> Dict[str, np.ndarray]:
        return self._named(Module.parameters)

    def gradients(self) -> Dict[str, np.ndarray]:
        return self._named(Module.gradients)

    def state(self) -> Dict[str, np.ndarray]:
        """Every array needed to restore the network, running statistics included."""

        return self._named(Module.state)

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        own = self.state()
        missing = sorted(set(own) - set(arrays))
        unexpected = sorted(set(arrays) - set(own))
        if missing or unexpected:
            raise ShapeError(f"load_state: missing {missing}, unexpected {unexpected}")
        for key, target in own.items():
            value = arrays[key]
            if value.shape != target.shape:
                raise ShapeError(f"load_state: {key} has shape {value.shape}, expected {target.shape}")
            target[...] = value

    def predict(self, images: Tensor, *, batch_size: int = 256) -> np.ndarray:
        """Predicted class per example, inference mode."""

        classes = []
        for start in range(0, images.shape[0], batch_size):
            logits = self.forward(images[start : start + batch_size], training=False)
            classes.append(np.argmax(logits, axis=1))
        if not classes:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(classes).astype(np.int64)

    def feature_layers(self) -> List[Tuple[int, Module]]:
        """(layer position, module) for every spatial feature layer, in order."""

        features = [module for module in self.modules if module.name in _FEATURE_NAMES]
        return list(enumerate(features))

    def layer_inputs(self, images: Tensor) -> List[Tensor]:
        """Inference-mode input of every feature layer, for input-dependent weight maps."""

        inputs: List[Tensor] = []
        activations = as_tensor(images)
        for module in self.modules:
            if module.name in _FEATURE_NAMES:
                inputs.append(activations)
            activations = module.forward(activations, training=False)
        return inputs

    def lowered(self) -> "Network":
        """Copy with every fixed-weight LRLC layer materialized into a locally connected layer."""

        modules: List[Module] = []
        for module in self.modules:
            if isinstance(module, DynamicLrlc):
                raise UnsupportedOperationError(
                    "cannot lower dynamic_lrlc: its per-position filters depend on each input example"
                )
            if isinstance(module, Lrlc):
                modules.append(Local(lower_to_local(module.params)))
            else:
                modules.append(_fresh_copy(module))
        lowered = sum(isinstance(module, Lrlc) for module in self.modules)
        logger.info("Lowered %d LRLC layer(s) to locally connected layers", lowered)
        return Network(self.spec, modules, lowered=True)


_FEATURE_NAMES = frozenset({"conv", "coordconv", "local", "lrlc", "dynamic_lrlc"})


def _fresh_copy(module: Module) -> Module:
    clone = copy.copy(module)
    clone.params = copy.deepcopy(module.params)
    clone.grads = None
    for attribute in ("_cache", "_inputs", "_shape"):
        if hasattr(clone, attribute):
            setattr(clone, attribute, None)
    return clone


def _feature_module(layer, geometry, rng: np.random.Generator) -> Module:
    height, width = geometry.height, geometry.width
    cin, cout = geometry.in_channels, geometry.out_channels
    size = layer.filter_size
    if layer.kind in (LayerKind.CONV, LayerKind.WIDE_CONV):
        return Conv(ConvLayer.initialize(size, cin, cout, rng))
    if layer.kind == LayerKind.COORDCONV:
        return CoordConv(ConvLayer.initialize(size, cin + 2, cout, rng))
    if layer.kind == LayerKind.LOCAL:
        return Local(LocalLayer.initialize(height, width, size, cin, cout, rng))
    if layer.kind == LayerKind.LRLC:
        params = LrlcLayer.empty(height, width, size, cin, cout, int(layer.rank), layer.weights_mode)
        return Lrlc(initialize(params, rng, layer.init))
    rank = int(layer.rank)
    basis = FilterBasis(he_uniform((rank, size, size, cin, cout), size * size * cin, rng))
    weight_net = DynamicWeightNet.initialize(cin, rank, rng, layer.weight_net)
    return DynamicLrlc(DynamicLrlcLayer(basis=basis, weight_net=weight_net, bias=SpatialBias.zeros(height, width, cout)))


def build_network(spec: ModelSpec, rng: np.random.Generator) -> Network:
    """Instantiate and initialize every layer of ``spec`` in order."""

    if not spec.layers:
        raise ConfigurationError("model spec has no layers")
    modules: List[Module] = []
    geometries = spec.geometries()
    for layer, geometry in zip(spec.layers, geometries):
        modules.append(_feature_module(layer, geometry, rng))
        modules.append(BatchNorm(BatchNormState.initialize(geometry.out_channels)))
        modules.append(Relu())
    last = geometries[-1]
    if spec.head == Head.FC:
        modules.append(Flatten())
        features = last.height * last.width * last.out_channels
    else:
        modules.append(GlobalPool())
        features = last.out_channels
    modules.append(Dense(DenseLayer.initialize(features, spec.num_classes, rng)))
    logger.debug("Built network: %s", " -> ".join(module.name for module in modules))
    return Network(spec, modules)
