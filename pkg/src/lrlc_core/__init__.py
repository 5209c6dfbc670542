"""Numerical core: layers, low-rank locally connected layers, cost model and containers."""

from .costs import CostMode, CostReport, count_flops, count_params, model_costs
from .dynamic import (
    DynamicLrlcLayer,
    DynamicWeightNet,
    bilinear_resize,
    dynamic_lrlc_forward,
    lower_dynamic_example,
    predict_logits,
)
from .errors import (
    ConfigSchemaError,
    ConfigurationError,
    DataError,
    DataFormatError,
    LrlcError,
    NonFiniteError,
    ShapeError,
    UnsupportedOperationError,
)
from .gradcheck import GradCheckReport, grad_check
from .layers import ConvLayer, LocalLayer, SpatialBias, conv2d_forward, local_forward, spatial_bias_add
from .lowrank import (
    CombiningWeights,
    FilterBasis,
    InitMode,
    LrlcLayer,
    WeightsMode,
    combine_logits,
    init_structured,
    lower_to_local,
    lrlc_forward,
    normalize_weights,
)
from .network import Network, build_network
from .serialization import load_tensor, save_tensor
from .specs import Head, LayerKind, LayerSpec, ModelSpec, ModelTemplate, Placement, WeightNetConfig
from .tensor_ops import extract_patches, matmul, numeric_mode, set_test_mode

__all__ = [
    "CombiningWeights",
    "ConfigSchemaError",
    "ConfigurationError",
    "ConvLayer",
    "CostMode",
    "CostReport",
    "DataError",
    "DataFormatError",
    "DynamicLrlcLayer",
    "DynamicWeightNet",
    "FilterBasis",
    "GradCheckReport",
    "Head",
    "InitMode",
    "LayerKind",
    "LayerSpec",
    "LocalLayer",
    "LrlcError",
    "LrlcLayer",
    "ModelSpec",
    "ModelTemplate",
    "Network",
    "NonFiniteError",
    "Placement",
    "ShapeError",
    "SpatialBias",
    "UnsupportedOperationError",
    "WeightNetConfig",
    "WeightsMode",
    "bilinear_resize",
    "build_network",
    "combine_logits",
    "conv2d_forward",
    "count_flops",
    "count_params",
    "dynamic_lrlc_forward",
    "extract_patches",
    "grad_check",
    "init_structured",
    "load_tensor",
    "local_forward",
    "lower_dynamic_example",
    "lower_to_local",
    "lrlc_forward",
    "matmul",
    "model_costs",
    "normalize_weights",
    "numeric_mode",
    "predict_logits",
    "save_tensor",
    "set_test_mode",
    "spatial_bias_add",
]
