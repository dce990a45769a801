"""Spatial primitives: convolution, pooling, batch norm, softpool, upsampling.

All operate on NCHW tensors. conv2d lowers to an im2col matmul so the hot
training path runs on BLAS; backward scatters through the same patch layout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor, _make


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected NCHW input, got shape {x.shape}")


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> windows [N,C,Ho,Wo,kh,kw] with the given stride."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride, :, :]


def _scatter_windows(gw: np.ndarray, padded_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of `_patches`: accumulate window grads [N,C,Ho,Wo,kh,kw] back."""
    out = np.zeros(padded_shape, dtype=gw.dtype)
    ho, wo = gw.shape[2], gw.shape[3]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gw[:, :, :, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x [N×C×H×W]`` with ``w [F×C×kh×kw]``, zero padding.

    Lowered to one GEMM per kernel offset; the per-offset column matrices are
    kept alive for the backward pass.
    """
    _check_nchw(x, "conv2d")
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: weight shape {w.shape} does not match input shape {x.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} with stride {stride}, pad {pad} produces empty output on {h}x{wd} input"
        )
    hp, wp = h + 2 * pad, wd + 2 * pad
    k2 = kh * kw
    nhw = n * ho * wo
    # channels-last internally: one [NHW x C] GEMM per kernel offset keeps the
    # long axis as GEMM rows and the working set cache-resident
    if pad:
        xph = np.zeros((n, hp, wp, c), dtype=x.dtype)
        xph[:, pad : pad + h, pad : pad + wd, :] = x.data.transpose(0, 2, 3, 1)
    else:
        xph = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(k2, c, f)
    cols = []
    acc = None
    for i in range(kh):
        for j in range(kw):
            col = np.ascontiguousarray(
                xph[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :]
            ).reshape(nhw, c)
            cols.append(col)
            term = col @ wmat[i * kw + j]
            acc = term if acc is None else np.add(acc, term, out=acc)
    out = np.ascontiguousarray(acc.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(nhw, f)
        gw = np.empty((k2, c, f), dtype=g.dtype)
        gxph = np.zeros((n, hp, wp, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                idx = i * kw + j
                gw[idx] = cols[idx].T @ gmat
                gcol = gmat @ wmat[idx].T
                gxph[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += gcol.reshape(
                    n, ho, wo, c
                )
        gw_out = np.ascontiguousarray(gw.reshape(kh, kw, c, f).transpose(3, 2, 0, 1))
        gxp = gxph.transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return np.ascontiguousarray(gx), gw_out

    return _make(out, (x, w), backward)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    _check_nchw(x, "avg_pool2d")
    stride = stride or window
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, window, stride, 0), _out_extent(w, window, stride, 0)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"avg_pool2d: window {window}, stride {stride} empty on {h}x{w}")
    win = _patches(x.data, window, window, stride)
    out = win.mean(axis=(4, 5))
    shape = x.shape

    def backward(g):
        gw = np.broadcast_to(g[..., None, None] / (window * window), win.shape)
        return (_scatter_windows(gw, shape, window, window, stride),)

    return _make(out, (x,), backward)


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    _check_nchw(x, "max_pool2d")
    stride = stride or window
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, window, stride, 0), _out_extent(w, window, stride, 0)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"max_pool2d: window {window}, stride {stride} empty on {h}x{w}")
    win = _patches(x.data, window, window, stride).reshape(n, c, ho, wo, window * window)
    arg = win.argmax(axis=4)
    out = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    shape = x.shape

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=4)
        gw = gw.reshape(n, c, ho, wo, window, window)
        return (_scatter_windows(gw, shape, window, window, stride),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N×C×H×W] -> [N×C]."""
    _check_nchw(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w),)

    return _make(out, (x,), backward)


def upsample_nearest(x: Tensor, factor_h: int, factor_w: int) -> Tensor:
    """Replicate each pixel into a ``factor_h × factor_w`` block."""
    _check_nchw(x, "upsample_nearest")
    if factor_h < 1 or factor_w < 1:
        raise DimensionError(f"upsample_nearest: factors must be >= 1, got ({factor_h}, {factor_w})")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor_h, axis=2), factor_w, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor_h, w, factor_w).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def softpool2d(x: Tensor, window, stride=None) -> Tensor:
    """Exponentially weighted pooling: each window contributes
    ``sum_i softmax(a)_i * a_i``, computed with max subtraction for stability.

    The output is a convex combination of the window entries, so it lies
    between the window mean and the window max. ``window`` and ``stride``
    accept an int or an (h, w) pair.
    """
    _check_nchw(x, "softpool2d")
    kh, kw = _pair(window)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    if min(kh, kw, sh, sw) < 1:
        raise DimensionError(f"softpool2d: window and stride must be >= 1, got {window}, {stride}")
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kh, sh, 0), _out_extent(w, kw, sw, 0)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"softpool2d: window {window}, stride {stride} empty on {h}x{w}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw, :, :]
    win = win.reshape(n, c, ho, wo, kh * kw)
    shifted = win - win.max(axis=4, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=4, keepdims=True)
    out = (weights * win).sum(axis=4)
    shape = x.shape

    def backward(g):
        # d out / d a_m = w_m * (1 + a_m - out)
        gw = g[..., None] * weights * (1.0 + win - out[..., None])
        gw = gw.reshape(n, c, ho, wo, kh, kw)
        acc = np.zeros(shape, dtype=gw.dtype)
        for i in range(kh):
            for j in range(kw):
                acc[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw] += gw[:, :, :, :, i, j]
        return (acc,)

    return _make(out, (x,), backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization with affine scale/shift.

    In training mode normalizes by batch statistics and folds them into the
    running buffers as ``running = momentum*running + (1-momentum)*batch``
    (in place). In eval mode the running buffers are used as constants.
    """
    _check_nchw(x, "batch_norm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d: affine shapes {gamma.shape}/{beta.shape} need ({c},)")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    # fold normalization and affine into one scale/shift pass
    scale = (gamma.data * inv_std).reshape(1, c, 1, 1)
    shift = (beta.data - gamma.data * inv_std * mean).reshape(1, c, 1, 1)
    out = x.data * scale + shift
    x_data = x.data

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggx_sum = (g * x_data).sum(axis=(0, 2, 3))
        ggamma = (ggx_sum - mean * gbeta) * inv_std  # = sum(g * xhat)
        b = gamma.data * inv_std
        if training:
            gvar = ggamma * gamma.data * (-0.5) * inv_std * inv_std
            gmean = -b * gbeta  # the gvar contribution vanishes: sum(x - mean) = 0
            gx = (
                g * b.reshape(1, c, 1, 1)
                + (x_data - mean.reshape(1, c, 1, 1)) * ((2.0 / m) * gvar).reshape(1, c, 1, 1)
                + (gmean / m).reshape(1, c, 1, 1)
            )
        else:
            gx = g * b.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)
