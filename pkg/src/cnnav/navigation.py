"""Cross-layer navigation: the high->low ConvLSTM sweep, low->high attention and heads.

Levels are always indexed 3, 4, 5 (backbone stages) and lists of per-level
tensors are ordered low -> high.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .backbone import StageFeatures
from .engine import (
    ShapeError,
    Tensor,
    add,
    broadcast_mul,
    channel_slice,
    conv_transpose2d,
    gap,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax_cross_entropy,
    tanh,
    upsample_nearest,
)
from .layers import Params, add_conv, add_deconv, add_linear, conv, fc

__all__ = [
    "LEVELS",
    "NavConfig",
    "ConvLstmState",
    "AttentionMasks",
    "NavOutputs",
    "init_navigation",
    "align_features",
    "convlstm_cell_forward",
    "hl_fuse",
    "hl_restore",
    "hl_pathway_forward",
    "spatial_attention",
    "channel_attention",
    "fuse_masks",
    "lh_pathway_forward",
    "classifier_head_forward",
    "compute_loss",
    "combine_predictions",
    "softmax_np",
]

LEVELS = (3, 4, 5)


@dataclass(frozen=True)
class NavConfig:
    """Navigation hyperparameters.

    ``nav_height``/``nav_width`` default to the stage-3 map size and
    ``ca_hidden`` to ``nav_channels // 4``.
    """

    nav_channels: int = 32
    nav_height: Optional[int] = None
    nav_width: Optional[int] = None
    convlstm_kernel: int = 3
    ca_hidden: Optional[int] = None
    cls_hidden: int = 64
    num_classes: int = 4

    def __post_init__(self):
        if self.nav_channels < 1 or self.cls_hidden < 1 or self.num_classes < 1:
            raise ValueError("nav_channels, cls_hidden and num_classes must be >= 1")
        if self.convlstm_kernel < 1 or self.convlstm_kernel % 2 == 0:
            raise ValueError(f"convlstm_kernel must be odd, got {self.convlstm_kernel}")
        if self.ca_hidden is not None and self.ca_hidden < 1:
            raise ValueError("ca_hidden must be >= 1")

    @property
    def ca_width(self) -> int:
        return self.ca_hidden if self.ca_hidden is not None else max(1, self.nav_channels // 4)


class ConvLstmState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class AttentionMasks:
    spatial: List[Tensor] = field(default_factory=list)
    channel: List[Tensor] = field(default_factory=list)
    ca_carry: List[Tensor] = field(default_factory=list)


@dataclass
class NavOutputs:
    hl_features: List[Tensor]
    attended: List[Tensor]
    logits: List[Tensor]
    masks: Optional[AttentionMasks] = None
    fused: Optional[List[Tensor]] = None  # HL maps before restoring (ConvLSTM hidden states for ``full``)


def init_navigation(
    cfg: NavConfig,
    stage_channels: Sequence[int],
    rng: np.random.Generator,
    params: Params,
    hl_mode: str = "convlstm",
    attention: bool = True,
) -> None:
    """Create navigation parameters for the levels whose channel counts are given (low -> high)."""
    cn, k = cfg.nav_channels, cfg.convlstm_kernel
    for lvl, cl in zip(LEVELS, stage_channels):
        add_conv(params, rng, f"nav.align{lvl}", cl, cn, 1)
    if hl_mode == "convlstm":
        add_conv(params, rng, "nav.convlstm.x", cn, 4 * cn, k)
        add_conv(params, rng, "nav.convlstm.h", cn, 4 * cn, k, bias=False)
    elif hl_mode != "sum":
        raise ValueError(f"unknown hl_mode {hl_mode!r}")
    for lvl, cl in zip(LEVELS, stage_channels):
        add_conv(params, rng, f"nav.restore{lvl}", cn, cl, 1)
    if attention:
        for lvl, cl in zip(LEVELS, stage_channels):
            add_deconv(params, rng, f"nav.sa{lvl}", cl, 1, 3)
            add_linear(params, rng, f"nav.ca{lvl}.fc1", cl, cfg.ca_width)
            add_linear(params, rng, f"nav.ca{lvl}.fc2", cfg.ca_width, cl)
    for lvl, cl in zip(LEVELS, stage_channels):
        add_linear(params, rng, f"nav.cls{lvl}.fc1", cl, cfg.cls_hidden)
        add_linear(params, rng, f"nav.cls{lvl}.fc2", cfg.cls_hidden, cfg.num_classes)


def _nav_size(cfg: NavConfig, feats: StageFeatures) -> Tuple[int, int]:
    _, _, h3, w3 = feats.s3.shape
    return (cfg.nav_height or h3, cfg.nav_width or w3)


# --------------------------------------------------------------------------
# high -> low pathway
# --------------------------------------------------------------------------


def align_features(feats: StageFeatures, cfg: NavConfig, params: Params) -> List[Tensor]:
    """Bring S3/S4/S5 to a common [N, C_nav, H_nav, W_nav] shape (nearest resize, 1x1 conv, relu)."""
    hn, wn = _nav_size(cfg, feats)
    return [
        relu(conv(params, f"nav.align{lvl}", upsample_nearest(f, hn, wn)))
        for lvl, f in zip(LEVELS, feats.levels())
    ]


def convlstm_cell_forward(x: Tensor, state: ConvLstmState, params: Params, prefix: str = "nav.convlstm") -> ConvLstmState:
    """One ConvLSTM step with gates packed as (input, forget, cell, output) along channels."""
    if state.h.shape != state.c.shape:
        raise ShapeError("ConvLSTM h and c must share a shape")
    if x.shape[0] != state.h.shape[0] or x.shape[2:] != state.h.shape[2:]:
        raise ShapeError(f"ConvLSTM input {x.shape} incompatible with state {state.h.shape}")
    cn = state.h.shape[1]
    gates = add(conv(params, f"{prefix}.x", x), conv(params, f"{prefix}.h", state.h))
    if gates.shape[1] != 4 * cn:
        raise ShapeError(f"ConvLSTM weights produce {gates.shape[1]} gate channels, expected {4 * cn}")
    i = sigmoid(channel_slice(gates, 0, cn))
    f = sigmoid(channel_slice(gates, cn, 2 * cn))
    g = tanh(channel_slice(gates, 2 * cn, 3 * cn))
    o = sigmoid(channel_slice(gates, 3 * cn, 4 * cn))
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return ConvLstmState(h, c)


def zero_state(like: Tensor, channels: int) -> ConvLstmState:
    n, _, h, w = like.shape
    z = np.zeros((n, channels, h, w), dtype=like.dtype)
    return ConvLstmState(Tensor(z), Tensor(z.copy()))


def hl_fuse(
    aligned: Sequence[Tensor],
    cfg: NavConfig,
    params: Params,
    mode: str = "convlstm",
    order: Sequence[int] = (5, 4, 3),
) -> List[Tensor]:
    """Fuse the aligned maps high -> low; returns one fused map per level (low -> high).

    ``mode="convlstm"`` sweeps a ConvLSTM over (S5, S4, S3) from a zero state
    and takes the hidden map after each step; ``order`` exists only so tests can
    run the sweep in another direction. ``mode="sum"`` is the top-down additive
    fusion used in the ablation (each level adds everything above it).
    """
    a3, a4, a5 = aligned
    if mode == "convlstm":
        by_level = dict(zip(LEVELS, aligned))
        state = zero_state(a5, cfg.nav_channels)
        fused = {}
        for lvl in order:
            state = convlstm_cell_forward(by_level[lvl], state, params)
            fused[lvl] = state.h
    elif mode == "sum":
        p5 = a5
        p4 = add(a4, p5)
        fused = {5: p5, 4: p4, 3: add(a3, p4)}
    else:
        raise ValueError(f"unknown hl mode {mode!r}")
    return [fused[lvl] for lvl in LEVELS]


def hl_restore(fused: Sequence[Tensor], feats: StageFeatures, params: Params) -> List[Tensor]:
    """Resize each fused map to its level's native size and channel count (nearest, 1x1 conv, relu)."""
    out = []
    for lvl, x, f in zip(LEVELS, fused, feats.levels()):
        _, _, hl, wl = f.shape
        out.append(relu(conv(params, f"nav.restore{lvl}", upsample_nearest(x, hl, wl))))
    return out


def hl_pathway_forward(
    aligned: Sequence[Tensor],
    feats: StageFeatures,
    cfg: NavConfig,
    params: Params,
    mode: str = "convlstm",
    order: Sequence[int] = (5, 4, 3),
) -> List[Tensor]:
    """:func:`hl_fuse` followed by :func:`hl_restore`."""
    return hl_restore(hl_fuse(aligned, cfg, params, mode, order), feats, params)


# --------------------------------------------------------------------------
# low -> high pathway
# --------------------------------------------------------------------------


def spatial_attention(x: Tensor, params: Params, level: int) -> Tensor:
    """Per-pixel mask in (0, 1): 3x3 size-preserving transposed conv to one channel, then sigmoid."""
    p = f"nav.sa{level}"
    return sigmoid(conv_transpose2d(x, params[f"{p}.weight"], params[f"{p}.bias"], stride=1, padding=1))


def channel_attention(x: Tensor, carry: Tensor, params: Params, level: int) -> Tuple[Tensor, Tensor]:
    """Per-channel mask in (0, 1) plus the bottleneck embedding handed to the next level up.

    The previous level's embedding is added to this level's first FC output
    before the relu.
    """
    p = f"nav.ca{level}"
    n, c = x.shape[:2]
    e = relu(add(fc(params, f"{p}.fc1", gap(x)), carry))
    mask = sigmoid(fc(params, f"{p}.fc2", e))
    return reshape(mask, (n, c, 1, 1)), e


def fuse_masks(spatial: Tensor, channel: Tensor) -> Tensor:
    """Pixel-wise mask ``spatial[n,0,h,w] * channel[n,c,0,0]``."""
    if spatial.ndim != 4 or channel.ndim != 4 or spatial.shape[1] != 1 or channel.shape[2:] != (1, 1):
        raise ShapeError(f"fuse_masks expects [N,1,H,W] and [N,C,1,1], got {spatial.shape}, {channel.shape}")
    if spatial.shape[0] != channel.shape[0]:
        raise ShapeError(f"batch mismatch: {spatial.shape[0]} vs {channel.shape[0]}")
    return mul(spatial, channel)


def lh_pathway_forward(hl_features: Sequence[Tensor], cfg: NavConfig, params: Params) -> Tuple[List[Tensor], AttentionMasks]:
    """Attend each level low -> high, threading the channel-attention carry upward."""
    n = hl_features[0].shape[0]
    carry = Tensor(np.zeros((n, cfg.ca_width), dtype=hl_features[0].dtype))
    masks = AttentionMasks()
    attended = []
    for lvl, x in zip(LEVELS, hl_features):
        sa = spatial_attention(x, params, lvl)
        ca, carry = channel_attention(x, carry, params, lvl)
        masks.spatial.append(sa)
        masks.channel.append(ca)
        masks.ca_carry.append(carry)
        attended.append(broadcast_mul(x, fuse_masks(sa, ca)))
    return attended, masks


# --------------------------------------------------------------------------
# classifiers
# --------------------------------------------------------------------------


def classifier_head_forward(x: Tensor, params: Params, level: int) -> Tensor:
    p = f"nav.cls{level}"
    return fc(params, f"{p}.fc2", relu(fc(params, f"{p}.fc1", gap(x))))


def compute_loss(outputs, labels) -> Tensor:
    """Unweighted sum of the per-head cross-entropies.

    Accepts a :class:`NavOutputs` or a plain sequence of logits.
    """
    total = None
    for z in getattr(outputs, "logits", outputs):
        l = softmax_cross_entropy(z, labels)
        total = l if total is None else add(total, l)
    return total


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64) - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def combine_predictions(outputs) -> np.ndarray:
    """Argmax of the mean head softmax; ties go to the lowest class index."""
    probs = np.mean([softmax_np(z.data) for z in getattr(outputs, "logits", outputs)], axis=0)
    return np.argmax(probs, axis=1)
