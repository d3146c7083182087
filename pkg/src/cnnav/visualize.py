"""Per-level attention maps for a single image.

For every navigation level the exporter writes two grayscale maps:

``<stem>.s{l}.mask.pgm``
    the raw spatial-attention mask (values already in (0, 1)).
``<stem>.s{l}.energy.pgm``
    the channel-wise L2 norm of the attended features, min-max normalized.

Both are nearest-upsampled to the input resolution so the levels line up
side by side. A constant map has no range to normalize; it is written as
mid-gray (0.5, pixel 128).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .data import save_pgm
from .engine import Tensor
from .model import Model
from .navigation import LEVELS

__all__ = ["LevelMaps", "NoAttentionError", "attention_maps", "minmax_normalize", "upsample_nearest", "export_attention_maps"]


class NoAttentionError(ValueError):
    """The model has no spatial attention to visualize (baseline or hl_sum)."""


@dataclass
class LevelMaps:
    level: int
    mask: np.ndarray  # [h, w] raw spatial mask
    energy: np.ndarray  # [h, w] channel-wise L2 of the attended map, unnormalized


def minmax_normalize(arr: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant array becomes all 0.5."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if not hi > lo:
        return np.full_like(arr, 0.5)
    return (arr - lo) / (hi - lo)


def upsample_nearest(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D map (also handles non-integer ratios)."""
    rows = (np.arange(height) * arr.shape[0]) // height
    cols = (np.arange(width) * arr.shape[1]) // width
    return arr[rows][:, cols]


def attention_maps(model: Model, image: np.ndarray) -> List[LevelMaps]:
    """Native-resolution maps for one ``[3, H, W]`` image, ordered as levels 3, 4, 5.

    Raises:
        NoAttentionError: if the model variant has no spatial attention.
    """
    if model.variant in ("baseline", "hl_sum"):
        raise NoAttentionError(f"variant {model.variant!r} has no attention masks")
    dtype = next(iter(model.params.values())).dtype
    out = model.forward(Tensor(np.asarray(image, dtype=dtype)[None]), train=False)
    maps = []
    for lvl, mask, att in zip(LEVELS, out.masks.spatial, out.attended):
        energy = np.sqrt(np.sum(att.data[0].astype(np.float64) ** 2, axis=0))
        maps.append(LevelMaps(lvl, mask.data[0, 0].astype(np.float64), energy))
    return maps


def export_attention_maps(model: Model, image: np.ndarray, out_dir, stem: str) -> Dict[str, Path]:
    """Write the six PGM maps for one image and return them keyed by file name."""
    out_dir = Path(out_dir)
    h, w = image.shape[-2:]
    written = {}
    for m in attention_maps(model, image):
        for kind, arr in (("mask", m.mask), ("energy", minmax_normalize(m.energy))):
            path = out_dir / f"{stem}.s{m.level}.{kind}.pgm"
            save_pgm(upsample_nearest(arr, h, w), path)
            written[path.name] = path
    return written
