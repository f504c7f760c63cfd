"""Convolution, pooling and attention built on the tensor core."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, _make, matmul, scale, softmax, swapaxes


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``[c_in, h, w]`` or batched ``[n, c_in, h, w]``; ``kernels`` is
    ``[c_out, c_in, kh, kw]``.  The output keeps the batching of ``x``.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: expected [n,c,h,w] input and 4-D kernels, got {x.shape} and {kernels.shape}")
    n, c_in, h, w = xd.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernels expect {k_in}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (n, ho, wo), cols: (c_in, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    wmat = kernels.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c_in, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if squeeze:
            gx = gx[0]
        return gx, gk

    return _make(out, (x, kernels), backward)


def mean_pool(x: Tensor, window: int | None = None) -> Tensor:
    """Average over the two trailing spatial axes.

    With ``window=None`` this is global pooling and the spatial axes are
    dropped.  Otherwise non-overlapping ``window x window`` blocks are
    averaged; trailing rows/columns that do not fill a block are ignored.
    """
    if x.ndim < 2:
        raise ShapeError(f"mean_pool needs at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if window is None:
        out = x.data.mean(axis=(-2, -1))

        def backward(g):
            return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

        return _make(out, (x,), backward)

    if window < 1 or window > min(h, w):
        raise ShapeError(f"mean_pool window {window} does not fit spatial extent {h}x{w}")
    ho, wo = h // window, w // window
    lead = x.shape[:-2]
    cropped = x.data[..., :ho * window, :wo * window]
    blocks = cropped.reshape(*lead, ho, window, wo, window)
    out = blocks.mean(axis=(-3, -1))

    def backward(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, window, axis=-2), window, axis=-1) / (window * window)
        gx[..., :ho * window, :wo * window] = spread
        return (gx,)

    return _make(out, (x,), backward)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 return_weights: bool = False):
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    logits = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(logits, axis=-1)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out
