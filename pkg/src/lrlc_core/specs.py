"""Declarative layer and model descriptions."""

from __future__ import annotations

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigurationError
from .lowrank import InitMode, WeightsMode

# Desk-scale cap on the spatial rank.
MAX_RANK = 16


class LayerKind(str, Enum):
    CONV = "conv"
    LOCAL = "local"
    COORDCONV = "coordconv"
    LRLC = "lrlc"
    DYNAMIC_LRLC = "dynamic_lrlc"
    WIDE_CONV = "wide_conv"


RANKED_KINDS = frozenset({LayerKind.LRLC, LayerKind.DYNAMIC_LRLC, LayerKind.WIDE_CONV})


class Placement(str, Enum):
    FIRST = "first"
    SECOND = "second"
    THIRD = "third"
    ALL = "all"

    def positions(self, depth: int) -> List[int]:
        if self == Placement.ALL:
            return list(range(depth))
        index = {Placement.FIRST: 0, Placement.SECOND: 1, Placement.THIRD: 2}[self]
        if index >= depth:
            raise ConfigurationError(f"placement {self.value} needs at least {index + 1} layers, model has {depth}")
        return [index]


class Head(str, Enum):
    GAP = "gap"
    FC = "fc"


class WeightNetConfig(BaseModel):
    """Sizes of the combining-weights network g; every field is configurable."""

    model_config = ConfigDict(extra="forbid")

    projection_channels: int = Field(default=8, ge=1)
    branches: List[Tuple[int, int]] = Field(
        default_factory=lambda: [(1, 1), (2, 2), (4, 4)],
        description="(average-pool window, depthwise dilation) per parallel branch",
    )
    bottleneck_channels: int = Field(default=8, ge=1)
    expansion_channels: int = Field(default=32, ge=1)

    @model_validator(mode="after")
    def _check_branches(self) -> "WeightNetConfig":
        if not self.branches:
            raise ValueError("weight net needs at least one branch")
        for window, dilation in self.branches:
            if window < 1 or dilation < 1:
                raise ValueError(f"branch {(window, dilation)}: window and dilation must be positive")
        return self


class LayerSpec(BaseModel):
    kind: LayerKind
    out_channels: int = Field(ge=1)
    filter_size: int = Field(default=3, ge=1)
    rank: Optional[int] = None
    weights_mode: WeightsMode = WeightsMode.FACTORIZED
    init: InitMode = InitMode.STRUCTURED
    weight_net: WeightNetConfig = Field(default_factory=WeightNetConfig)

    @model_validator(mode="after")
    def _check_rank(self) -> "LayerSpec":
        if self.filter_size % 2 == 0:
            raise ValueError(f"filter_size must be odd, got {self.filter_size}")
        if self.kind in RANKED_KINDS:
            if self.rank is None:
                raise ValueError(f"layer kind {self.kind.value} requires a rank")
            if not 1 <= self.rank <= MAX_RANK:
                raise ValueError(f"rank must be within 1..{MAX_RANK}, got {self.rank}")
        elif self.rank is not None:
            raise ValueError(f"layer kind {self.kind.value} does not take a rank")
        return self

    @property
    def width(self) -> int:
        """Output channels actually built; wide convolutions scale with the rank."""

        if self.kind == LayerKind.WIDE_CONV:
            return self.out_channels * int(self.rank)
        return self.out_channels


class LayerGeometry(BaseModel):
    """Bound extents of one layer inside a model."""

    height: int
    width: int
    in_channels: int
    out_channels: int


class ModelSpec(BaseModel):
    input_height: int = Field(ge=1)
    input_width: int = Field(ge=1)
    input_channels: int = Field(ge=1)
    num_classes: int = Field(default=10, ge=2)
    head: Head = Head.GAP
    layers: List[LayerSpec]

    def geometries(self) -> List[LayerGeometry]:
        channels = self.input_channels
        result = []
        for layer in self.layers:
            result.append(
                LayerGeometry(
                    height=self.input_height,
                    width=self.input_width,
                    in_channels=channels,
                    out_channels=layer.width,
                )
            )
            channels = layer.width
        return result


class ModelTemplate(BaseModel):
    """The stack of same-size layers, each followed by batchnorm and ReLU, then the head."""

    model_config = ConfigDict(extra="forbid")

    depth: int = Field(default=3, ge=1)
    channels: int = Field(default=64, ge=1)
    filter_size: int = Field(default=3, ge=1)
    head: Head = Head.GAP
    weights_mode: WeightsMode = WeightsMode.FACTORIZED
    init: InitMode = InitMode.STRUCTURED
    weight_net: WeightNetConfig = Field(default_factory=WeightNetConfig)

    def build(
        self,
        kind: LayerKind,
        *,
        rank: Optional[int],
        placement: Placement,
        input_shape: Tuple[int, int, int],
        num_classes: int = 10,
    ) -> ModelSpec:
        """Model with ``kind`` at the placed positions and convolution elsewhere."""

        placed = set(placement.positions(self.depth))
        layers = []
        for index in range(self.depth):
            layer_kind = kind if index in placed else LayerKind.CONV
            layers.append(
                LayerSpec(
                    kind=layer_kind,
                    out_channels=self.channels,
                    filter_size=self.filter_size,
                    rank=rank if layer_kind in RANKED_KINDS else None,
                    weights_mode=self.weights_mode,
                    init=self.init,
                    weight_net=self.weight_net,
                )
            )
        height, width, channels = input_shape
        return ModelSpec(
            input_height=height,
            input_width=width,
            input_channels=channels,
            num_classes=num_classes,
            head=self.head,
            layers=layers,
        )
