"""End-to-end gradient check on a micro model.

The check runs in 64-bit shadow mode on a 32x32 input with ``C_nav = 4`` and
three classes. Biases and batch-norm shifts are drawn at random (small
magnitude) instead of left at zero: with zero biases, dead features give relu
inputs that are exactly zero, where central differences straddle the kink and
disagree with any one-sided derivative.
"""
from __future__ import annotations

import copy

import numpy as np

from .backbone import BackboneConfig
from .engine import GradcheckReport, Tensor, gradcheck, shadow_mode
from .model import Model, build_model
from .navigation import NavConfig, compute_loss

__all__ = ["MICRO_BACKBONE", "MICRO_NAV", "MICRO_BATCH", "build_micro_model", "micro_gradcheck"]

MICRO_BACKBONE = BackboneConfig(input_size=32, num_classes=3)
MICRO_NAV = NavConfig(nav_channels=4, num_classes=3)
MICRO_BATCH = 4


def build_micro_model(variant: str = "full", seed: int = 0) -> Model:
    """Micro model in float64 with small random biases."""
    with shadow_mode():
        model = build_model(variant, MICRO_BACKBONE, MICRO_NAV, seed=seed)
    rng = np.random.default_rng([seed, 1])
    for name, p in model.params.items():
        if name.endswith((".bias", ".beta")):
            p.data[...] = rng.uniform(-0.1, 0.1, p.shape)
    return model


def micro_gradcheck(
    variant: str = "full",
    seed: int = 0,
    n_samples: int = 200,
    h: float = 1e-6,
    train_mode: bool = True,
) -> GradcheckReport:
    """Compare tape gradients of the summed head loss with central differences.

    Batch norm runs in training mode (batch statistics) by default; its
    running averages are restored after every evaluation so the loss is a
    pure function of the parameters.
    """
    model = build_micro_model(variant, seed)
    rng = np.random.default_rng([seed, 2])
    with shadow_mode():
        images = Tensor(rng.random((MICRO_BATCH, 3, MICRO_BACKBONE.input_size, MICRO_BACKBONE.input_size)))
        labels = rng.integers(0, MICRO_BACKBONE.num_classes, size=MICRO_BATCH)
        frozen = copy.deepcopy(model.buffers)

        def loss_fn(params):
            out = model.forward(images, train=train_mode)
            model.buffers.update(copy.deepcopy(frozen))
            return compute_loss(out, labels)

        return gradcheck(loss_fn, model.params, n_samples=n_samples, h=h, seed=seed)
