"""Exact parameter and multiply-accumulate accounting per layer.

One MAC is one multiply-accumulate. Softmax, weighted sums and bias adds are
tallied separately as ``elementwise_ops`` and never folded into MACs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List

from dataclasses_json import dataclass_json

from .dynamic import weight_net_macs, weight_net_params
from .errors import UnsupportedOperationError
from .lowrank import WeightsMode
from .specs import Head, LayerGeometry, LayerKind, LayerSpec, ModelSpec

FLOAT32_BYTES = 4


class CostMode(str, Enum):
    TRAIN = "train"
    LOWERED_INFERENCE = "lowered_inference"
    DYNAMIC = "dynamic"


@dataclass_json
@dataclass
class CostReport:
    """Parameter and multiply-accumulate counts of one layer in one cost mode."""

    kind: str
    mode: str
    trainable_params: int
    inference_macs: int
    inference_param_bytes: int
    param_breakdown: Dict[str, int] = field(default_factory=dict)
    mac_breakdown: Dict[str, int] = field(default_factory=dict)
    elementwise_ops: int = 0

    def __post_init__(self) -> None:
        if self.param_breakdown and sum(self.param_breakdown.values()) != self.trainable_params:
            raise ValueError(f"{self.kind}: parameter breakdown does not sum to {self.trainable_params}")
        if self.mac_breakdown and sum(self.mac_breakdown.values()) != self.inference_macs:
            raise ValueError(f"{self.kind}: MAC breakdown does not sum to {self.inference_macs}")


def _report(
    spec: LayerSpec,
    mode: CostMode,
    params: Dict[str, int],
    macs: Dict[str, int],
    stored_params: int,
    *,
    elementwise: int = 0,
    dtype_bytes: int = FLOAT32_BYTES,
) -> CostReport:
    return CostReport(
        kind=spec.kind.value,
        mode=mode.value,
        trainable_params=sum(params.values()),
        inference_macs=sum(macs.values()),
        inference_param_bytes=stored_params * dtype_bytes,
        param_breakdown=params,
        mac_breakdown=macs,
        elementwise_ops=elementwise,
    )


def count_flops(
    spec: LayerSpec, geometry: LayerGeometry, mode: CostMode = CostMode.TRAIN, *, dtype_bytes: int = FLOAT32_BYTES
) -> CostReport:
    """Cost of one layer for a single example under the given evaluation mode.

    ``train`` follows the training evaluation path, ``lowered_inference`` the
    path after an LRLC layer has been materialized into a locally connected
    layer, and ``dynamic`` the input-dependent path (dynamic LRLC only).
    """

    height, width = geometry.height, geometry.width
    cin, cout = geometry.in_channels, geometry.out_channels
    taps = spec.filter_size * spec.filter_size
    positions = height * width
    kind = spec.kind

    if mode == CostMode.DYNAMIC and kind != LayerKind.DYNAMIC_LRLC:
        raise UnsupportedOperationError(f"dynamic cost mode applies to dynamic_lrlc layers, not {kind.value}")

    if kind in (LayerKind.CONV, LayerKind.WIDE_CONV, LayerKind.COORDCONV):
        in_channels = cin + 2 if kind == LayerKind.COORDCONV else cin
        bank = taps * in_channels * cout
        params = {"filters": bank, "bias": cout}
        return _report(
            spec, mode, params, {"convolution": positions * bank}, bank + cout,
            elementwise=positions * cout, dtype_bytes=dtype_bytes,
        )

    if kind == LayerKind.LOCAL:
        bank = taps * cin * cout
        params = {"filters": positions * bank, "bias": cout}
        return _report(
            spec, mode, params, {"local": positions * bank}, positions * bank + cout,
            elementwise=positions * cout, dtype_bytes=dtype_bytes,
        )

    rank = int(spec.rank)
    bank = taps * cin * cout
    biases = height + width + cout
    conv_macs = positions * bank
    mixing = positions * rank * cout + positions * cout

    if kind == LayerKind.LRLC:
        if spec.weights_mode == WeightsMode.FULL:
            combining = positions * rank
            biases = positions * cout
        else:
            combining = (height + width) * rank
        params = {"basis": rank * bank, "combining_weights": combining, "biases": biases}
        if mode == CostMode.LOWERED_INFERENCE:
            return _report(
                spec, mode, params, {"local": conv_macs}, positions * bank + biases,
                elementwise=positions * cout, dtype_bytes=dtype_bytes,
            )
        return _report(
            spec, mode, params, {"basis_convolutions": rank * conv_macs}, sum(params.values()),
            elementwise=mixing + positions * rank, dtype_bytes=dtype_bytes,
        )

    if mode == CostMode.LOWERED_INFERENCE:
        raise UnsupportedOperationError("dynamic_lrlc layers cannot be lowered: their banks depend on the input")
    net_params = weight_net_params(cin, rank, spec.weight_net)
    params = {"basis": rank * bank, "weight_net": net_params, "biases": biases}
    macs = {
        "basis_convolutions": rank * conv_macs,
        "weight_net": weight_net_macs(height, width, cin, rank, spec.weight_net),
    }
    return _report(
        spec, mode, params, macs, sum(params.values()),
        elementwise=mixing + positions * rank, dtype_bytes=dtype_bytes,
    )


def count_params(spec: LayerSpec, geometry: LayerGeometry, *, dtype_bytes: int = FLOAT32_BYTES) -> CostReport:
    """Train-time parameter accounting; the report also carries training-path MACs."""

    mode = CostMode.DYNAMIC if spec.kind == LayerKind.DYNAMIC_LRLC else CostMode.TRAIN
    return count_flops(spec, geometry, mode, dtype_bytes=dtype_bytes)


def model_costs(model: ModelSpec, mode: CostMode = CostMode.TRAIN) -> List[CostReport]:
    """Per-layer reports for the feature layers, followed by batchnorm and head entries.

    Layers whose kind has no meaning under ``mode`` fall back to their train-path cost,
    so a whole model can be costed in lowered-inference mode.
    """

    reports: List[CostReport] = []
    geometries = model.geometries()
    for spec, geometry in zip(model.layers, geometries):
        layer_mode = mode
        if mode == CostMode.DYNAMIC and spec.kind != LayerKind.DYNAMIC_LRLC:
            layer_mode = CostMode.TRAIN
        if mode in (CostMode.LOWERED_INFERENCE, CostMode.TRAIN) and spec.kind == LayerKind.DYNAMIC_LRLC:
            layer_mode = CostMode.DYNAMIC
        reports.append(count_flops(spec, geometry, layer_mode))
        channels = geometry.out_channels
        reports.append(
            CostReport(
                kind="batchnorm",
                mode=mode.value,
                trainable_params=2 * channels,
                inference_macs=0,
                inference_param_bytes=4 * channels * FLOAT32_BYTES,
                param_breakdown={"gamma": channels, "beta": channels},
                elementwise_ops=2 * geometry.height * geometry.width * channels,
            )
        )
    last = geometries[-1]
    features = last.out_channels
    if model.head == Head.FC:
        features = last.height * last.width * last.out_channels
    head_params = features * model.num_classes
    reports.append(
        CostReport(
            kind=f"dense_{model.head.value}",
            mode=mode.value,
            trainable_params=head_params + model.num_classes,
            inference_macs=head_params,
            inference_param_bytes=(head_params + model.num_classes) * FLOAT32_BYTES,
            param_breakdown={"weights": head_params, "bias": model.num_classes},
            mac_breakdown={"dense": head_params},
        )
    )
    return reports
