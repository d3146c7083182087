"""Named-parameter helpers shared by the backbone and the navigation modules.

Models are plain dicts: ``params`` maps dotted names to grad-requiring
tensors, ``buffers`` maps names to numpy arrays that are not trained (batch
norm running statistics).
"""
from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from .engine import Tensor, batchnorm2d, conv2d, float_dtype, linear

Params = Dict[str, Tensor]
Buffers = Dict[str, np.ndarray]


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(float_dtype())


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def add_conv(params: Params, rng, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
    params[f"{name}.weight"] = _param(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k), f"{name}.weight")
    if bias:
        params[f"{name}.bias"] = _param(np.zeros(cout, dtype=float_dtype()), f"{name}.bias")


def add_deconv(params: Params, rng, name: str, cin: int, cout: int, k: int) -> None:
    params[f"{name}.weight"] = _param(kaiming_uniform(rng, (cin, cout, k, k), cin * k * k), f"{name}.weight")
    params[f"{name}.bias"] = _param(np.zeros(cout, dtype=float_dtype()), f"{name}.bias")


def add_linear(params: Params, rng, name: str, fin: int, fout: int) -> None:
    params[f"{name}.weight"] = _param(kaiming_uniform(rng, (fout, fin), fin), f"{name}.weight")
    params[f"{name}.bias"] = _param(np.zeros(fout, dtype=float_dtype()), f"{name}.bias")


def add_bn(params: Params, buffers: Buffers, name: str, c: int) -> None:
    params[f"{name}.gamma"] = _param(np.ones(c, dtype=float_dtype()), f"{name}.gamma")
    params[f"{name}.beta"] = _param(np.zeros(c, dtype=float_dtype()), f"{name}.beta")
    buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
    buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)


def conv(params: Params, name: str, x: Tensor, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    w = params[f"{name}.weight"]
    if padding is None:
        padding = (w.shape[2] - 1) // 2
    return conv2d(x, w, params.get(f"{name}.bias"), stride=stride, padding=padding)


def fc(params: Params, name: str, x: Tensor) -> Tensor:
    return linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def bn(params: Params, buffers: Buffers, name: str, x: Tensor, train: bool) -> Tensor:
    return batchnorm2d(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        buffers[f"{name}.running_mean"],
        buffers[f"{name}.running_var"],
        train=train,
    )
