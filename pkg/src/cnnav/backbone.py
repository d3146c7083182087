"""Five-stage residual feature extractor (a desk-scale ResNet stand-in)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .engine import ShapeError, Tensor, add, gap, relu
from .layers import Buffers, Params, add_bn, add_conv, add_linear, bn, conv, fc

__all__ = [
    "BackboneConfig",
    "StageFeatures",
    "init_backbone",
    "init_baseline_head",
    "backbone_forward",
    "baseline_forward",
    "backbone_param_count",
]


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    stage_channels: Tuple[int, int, int, int, int] = (8, 16, 32, 64, 128)
    blocks_per_stage: int = 1
    num_classes: int = 4
    in_channels: int = 3

    def __post_init__(self):
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.stage_channels) != 5 or min(self.stage_channels) < 1:
            raise ValueError("stage_channels needs five positive entries")
        if self.blocks_per_stage < 0 or self.num_classes < 1:
            raise ValueError("blocks_per_stage must be >= 0 and num_classes >= 1")


class StageFeatures(NamedTuple):
    s3: Tensor
    s4: Tensor
    s5: Tensor

    def levels(self):
        """Features ordered low -> high level."""
        return (self.s3, self.s4, self.s5)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, params: Params, buffers: Buffers) -> None:
    cin = cfg.in_channels
    for i, c in enumerate(cfg.stage_channels, start=1):
        stage = f"backbone.stage{i}"
        add_conv(params, rng, f"{stage}.conv", cin, c, 3, bias=False)
        add_bn(params, buffers, f"{stage}.bn", c)
        for j in range(cfg.blocks_per_stage):
            block = f"{stage}.block{j}"
            add_conv(params, rng, f"{block}.conv1", c, c, 3, bias=False)
            add_bn(params, buffers, f"{block}.bn1", c)
            add_conv(params, rng, f"{block}.conv2", c, c, 3, bias=False)
            add_bn(params, buffers, f"{block}.bn2", c)
        cin = c


def init_baseline_head(cfg: BackboneConfig, rng: np.random.Generator, params: Params) -> None:
    add_linear(params, rng, "baseline.fc", cfg.stage_channels[-1], cfg.num_classes)


def _stage(params, buffers, cfg, i, x, train):
    stage = f"backbone.stage{i}"
    x = relu(bn(params, buffers, f"{stage}.bn", conv(params, f"{stage}.conv", x, stride=2), train))
    for j in range(cfg.blocks_per_stage):
        block = f"{stage}.block{j}"
        y = relu(bn(params, buffers, f"{block}.bn1", conv(params, f"{block}.conv1", x), train))
        y = bn(params, buffers, f"{block}.bn2", conv(params, f"{block}.conv2", y), train)
        x = relu(add(x, y))
    return x


def backbone_forward(
    images: Tensor, cfg: BackboneConfig, params: Params, buffers: Buffers, train: bool = False
) -> StageFeatures:
    """Run the five stages and return the outputs of stages 3, 4 and 5."""
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"expected images [N,{cfg.in_channels},{cfg.input_size},{cfg.input_size}], got {images.shape}"
        )
    x = images
    outs = []
    for i in range(1, 6):
        x = _stage(params, buffers, cfg, i, x, train)
        outs.append(x)
    return StageFeatures(outs[2], outs[3], outs[4])


def baseline_forward(
    images: Tensor,
    cfg: BackboneConfig,
    params: Params,
    buffers: Buffers,
    train: bool = False,
    feats: Optional[StageFeatures] = None,
) -> Tensor:
    """No-navigation control: GAP over stage 5 followed by one FC layer."""
    if feats is None:
        feats = backbone_forward(images, cfg, params, buffers, train)
    return fc(params, "baseline.fc", gap(feats.s5))


def backbone_param_count(cfg: BackboneConfig) -> int:
    """Trainable scalars in the backbone (stage convs, residual convs, batch norms)."""
    total, cin = 0, cfg.in_channels
    for c in cfg.stage_channels:
        total += 9 * cin * c + 2 * c
        total += cfg.blocks_per_stage * 2 * (9 * c * c + 2 * c)
        cin = c
    return total
