"""Differentiable primitives used by the backbone and the navigation modules.

All image tensors are NCHW. Convolutions lower to a single matmul over an
im2col buffer; the accumulation order inside each output pixel is therefore
whatever BLAS chooses, and equality with a naive loop oracle holds to rounding
(about 1e-6 in float32, ~1e-15 in float64) rather than bit-exactly.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, current_tape

__all__ = [
    "add",
    "mul",
    "scale",
    "elementwise",
    "broadcast_mul",
    "sum_all",
    "reshape",
    "channel_slice",
    "sigmoid",
    "tanh",
    "relu",
    "activation",
    "conv2d",
    "conv_transpose2d",
    "linear",
    "gap",
    "upsample_nearest",
    "batchnorm2d",
    "softmax_cross_entropy",
    "BN_EPS",
    "BN_MOMENTUM",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _emit(op: str, inputs: tuple, data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), ad * bd, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def broadcast_mul(fmap: Tensor, mask: Tensor) -> Tensor:
    """Multiply an NCHW map by a spatial [N,1,H,W] or channel [N,C,1,1] mask."""
    if fmap.ndim != 4 or mask.ndim != 4:
        raise ShapeError("broadcast_mul expects two rank-4 tensors")
    n, c, h, w = fmap.shape
    if mask.shape not in ((n, 1, h, w), (n, c, 1, 1), (n, c, h, w)):
        raise ShapeError(f"mask shape {mask.shape} does not broadcast onto {fmap.shape}")
    return mul(fmap, mask)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), lambda g: (np.broadcast_to(g, shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[:, start:stop]`` along axis 1."""
    src = x.shape

    def bwd(g):
        full = np.zeros(src, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _emit("channel_slice", (x,), x.data[:, start:stop], bwd)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval even where exp saturates
    info = np.finfo(x.dtype)
    return np.clip(out, info.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)), out=out)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit("tanh", (x,), t, lambda g: (g * (1 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN as NaN, so a poisoned input cannot hide behind the relu
    return _emit("relu", (x,), np.maximum(x.data, x.dtype.type(0)), lambda g: (g * mask,))


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------


def _check_stride(stride: int, padding: int) -> None:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with a [Cout,Cin,kh,kw] kernel."""
    _check_stride(stride, padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1 and kw == 1:
        cols = xd[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("conv2d", inputs, out, bwd)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution with a [Cin,Cout,k,k] kernel.

    Every input pixel scatters ``x[n,:,i,j] @ weight`` into the output window
    anchored at ``(i*stride, j*stride)``; ``padding`` then crops each border, so
    the output side is ``(H-1)*stride - 2*padding + k``.
    """
    _check_stride(stride, padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv_transpose2d expects rank-4 input and weight")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d bias shape {bias.shape} != ({cout},)")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"padding {padding} leaves an empty output")

    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    wmat = weight.data.reshape(cin, cout * kh * kw)
    cols = (xm @ wmat).reshape(n, h, w, cout, kh, kw)
    full = np.zeros((n, cout, hf, wf), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gfull = np.zeros((n, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        dcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, cout * kh * kw)
        gx = (dcols @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ dcols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("conv_transpose2d", inputs, out, bwd)


# --------------------------------------------------------------------------
# dense / pooling / resizing
# --------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear expects [N,F] input and [G,F] weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear inner dimension mismatch: {x.shape[1]} vs {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("linear", inputs, out, bwd)


def gap(x: Tensor) -> Tensor:
    """Global average pooling [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError("gap expects an NCHW tensor")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def bwd(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)),)

    return _emit("gap", (x,), x.data.mean(axis=(2, 3)), bwd)


def _nearest_index(out_size: int, in_size: int) -> np.ndarray:
    return (np.arange(out_size) * in_size) // out_size


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize; source index is ``floor(dst * in / out)``.

    Serves both enlargement and shrinking.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError("upsample_nearest expects an NCHW tensor")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return _emit("upsample_nearest", (x,), x.data.copy(), lambda g: (g,))
    ih = _nearest_index(out_h, h)
    iw = _nearest_index(out_w, w)
    out = x.data[:, :, ih][:, :, :, iw]

    def bwd(g):
        rh = np.zeros((out_h, h), dtype=g.dtype)
        rh[np.arange(out_h), ih] = 1
        rw = np.zeros((out_w, w), dtype=g.dtype)
        rw[np.arange(out_w), iw] = 1
        return (np.ascontiguousarray(np.einsum("ah,ncab,bw->nchw", rh, g, rw, optimize=True)),)

    return _emit("upsample_nearest", (x,), np.ascontiguousarray(out), bwd)


# --------------------------------------------------------------------------
# normalization and loss
# --------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In train mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, like most frameworks).
    In eval mode the running buffers are used and left untouched.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm2d expects an NCHW tensor")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine parameters must have shape ({c},)")
    xd = x.data
    dt = xd.dtype.type
    gd = gamma.data[None, :, None, None]
    if train:
        m = n * h * w
        if m < 2:
            raise ValueError(f"batchnorm2d in train mode needs at least 2 values per channel, got {m}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        invstd = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
        xhat = (xd - mu[None, :, None, None]) * invstd[None, :, None, None]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))

        def bwd(g):
            gg = g * gd
            s1 = gg.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (gg * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (invstd[None, :, None, None] / m) * (m * gg - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        invstd = (1.0 / np.sqrt(running_var.astype(xd.dtype) + dt(eps))).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * invstd[None, :, None, None]

        def bwd(g):
            return g * gd * invstd[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gd + beta.data[None, :, None, None]
    return _emit("batchnorm2d", (x, gamma, beta), out, bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    The log-sum-exp is evaluated in float64 after max-subtraction so that
    confident predictions do not round to a zero loss.
    """
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects [N,K] logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), bwd)
