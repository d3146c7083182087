"""Model variants used by the trainer and the ablation runner.

``baseline``   backbone, GAP over stage 5, one FC.
``hl_sum``     high->low fusion by top-down feature addition, three heads.
``hl_lh_sum``  additive high->low fusion plus low->high attention.
``full``       ConvLSTM high->low fusion plus low->high attention.
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

from .backbone import BackboneConfig, backbone_forward, baseline_forward, init_backbone, init_baseline_head
from .checkpoint import CheckpointError
from .engine import Tensor
from .layers import Buffers, Params
from .navigation import (
    LEVELS,
    NavConfig,
    NavOutputs,
    align_features,
    classifier_head_forward,
    hl_fuse,
    hl_restore,
    init_navigation,
    lh_pathway_forward,
)

__all__ = ["VARIANTS", "Model", "build_model", "model_forward", "infer_model", "param_lr_group"]

VARIANTS = ("baseline", "hl_sum", "hl_lh_sum", "full")

_HL_MODE = {"hl_sum": "sum", "hl_lh_sum": "sum", "full": "convlstm"}
_ATTENTION = {"hl_sum": False, "hl_lh_sum": True, "full": True}


def param_lr_group(name: str) -> str:
    """Optimizer group of a parameter: ``backbone`` or ``other``."""
    return "backbone" if name.startswith("backbone.") else "other"


@dataclass
class Model:
    variant: str
    backbone: BackboneConfig
    nav: Optional[NavConfig]
    params: Params
    buffers: Buffers

    @property
    def num_classes(self) -> int:
        return self.backbone.num_classes

    def forward(self, images: Tensor, train: bool = False) -> NavOutputs:
        return model_forward(images, self, train=train)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: p.data.astype(np.float32) for k, p in self.params.items()}
        state.update({k: b.astype(np.float32) for k, b in self.buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = {k: p.shape for k, p in self.params.items()}
        expected.update({k: b.shape for k, b in self.buffers.items()})
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise CheckpointError(f"checkpoint does not match {self.variant} model: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, shape in expected.items():
            if tuple(state[k].shape) != tuple(shape):
                raise CheckpointError(f"shape mismatch for {k}: checkpoint {state[k].shape}, model {shape}")
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.dtype)
            p.grad = None
        for k, b in self.buffers.items():
            self.buffers[k] = np.array(state[k], dtype=np.float32)

    def clone(self, dtype=None) -> "Model":
        """Deep copy; ``dtype`` converts parameters (e.g. to a float64 shadow)."""
        params = {}
        for k, p in self.params.items():
            data = p.data.astype(dtype) if dtype is not None else p.data.copy()
            params[k] = Tensor(data, requires_grad=True, name=k)
        return Model(self.variant, self.backbone, self.nav, params, copy.deepcopy(self.buffers))


def build_model(
    variant: str,
    backbone: BackboneConfig,
    nav: Optional[NavConfig] = None,
    seed: int = 0,
) -> Model:
    """Initialize a model; parameters are drawn in a fixed name order from ``seed``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    params: Params = {}
    buffers: Buffers = {}
    init_backbone(backbone, rng, params, buffers)
    if variant == "baseline":
        init_baseline_head(backbone, rng, params)
        nav = None
    else:
        nav = nav or NavConfig(num_classes=backbone.num_classes)
        if nav.num_classes != backbone.num_classes:
            nav = replace(nav, num_classes=backbone.num_classes)
        init_navigation(
            nav, backbone.stage_channels[2:], rng, params, hl_mode=_HL_MODE[variant], attention=_ATTENTION[variant]
        )
    return Model(variant, backbone, nav, params, buffers)


def model_forward(images: Tensor, model: Model, train: bool = False) -> NavOutputs:
    """Backbone -> align -> HL pathway -> (LH pathway) -> heads."""
    feats = backbone_forward(images, model.backbone, model.params, model.buffers, train)
    if model.variant == "baseline":
        logits = baseline_forward(images, model.backbone, model.params, model.buffers, train, feats=feats)
        return NavOutputs([], [], [logits])
    aligned = align_features(feats, model.nav, model.params)
    fused = hl_fuse(aligned, model.nav, model.params, mode=_HL_MODE[model.variant])
    hl = hl_restore(fused, feats, model.params)
    masks = None
    if _ATTENTION[model.variant]:
        attended, masks = lh_pathway_forward(hl, model.nav, model.params)
    else:
        attended = list(hl)
    logits = [classifier_head_forward(x, model.params, lvl) for lvl, x in zip(LEVELS, attended)]
    return NavOutputs(hl, attended, logits, masks, fused)


def infer_model(state: Dict[str, np.ndarray], input_size: int) -> Model:
    """Reconstruct the architecture a checkpoint was saved from and load it."""
    names = set(state)
    if any(k.startswith("nav.convlstm.") for k in names):
        variant = "full"
    elif any(k.startswith("nav.sa") for k in names):
        variant = "hl_lh_sum"
    elif any(k.startswith("nav.") for k in names):
        variant = "hl_sum"
    elif "baseline.fc.weight" in names:
        variant = "baseline"
    else:
        raise CheckpointError("checkpoint holds neither navigation heads nor a baseline head")
    try:
        stage_channels = tuple(int(state[f"backbone.stage{i}.conv.weight"].shape[0]) for i in range(1, 6))
        in_channels = int(state["backbone.stage1.conv.weight"].shape[1])
        blocks = len({m.group(1) for k in names if (m := re.match(r"backbone\.stage1\.block(\d+)\.", k))})
        if variant == "baseline":
            num_classes = int(state["baseline.fc.weight"].shape[0])
            nav = None
        else:
            num_classes = int(state["nav.cls3.fc2.weight"].shape[0])
            nav = NavConfig(
                nav_channels=int(state["nav.align3.weight"].shape[0]),
                convlstm_kernel=int(state["nav.convlstm.x.weight"].shape[2]) if variant == "full" else 3,
                ca_hidden=int(state["nav.ca3.fc1.weight"].shape[0]) if variant != "hl_sum" else None,
                cls_hidden=int(state["nav.cls3.fc1.weight"].shape[0]),
                num_classes=num_classes,
            )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks expected record {exc}") from None
    cfg = BackboneConfig(
        input_size=input_size,
        stage_channels=stage_channels,
        blocks_per_stage=blocks,
        num_classes=num_classes,
        in_channels=in_channels,
    )
    model = build_model(variant, cfg, nav, seed=0)
    model.load_state_dict(state)
    return model
