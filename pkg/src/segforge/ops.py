"""Differentiable network primitives: convolutions, pooling, batch norm,
PReLU, and spatial dropout.

Convolutions lower to im2col + matmul per sample so BLAS does the heavy
lifting; backward passes recompute the column buffers instead of
retaining them, trading a little compute for bounded memory.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from segforge.tensor import ContractError, ShapeError, Tensor, _accum, make_rng

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "max_unpool2d",
    "PoolIndices",
    "BatchNormState",
    "batchnorm_state",
    "batchnorm2d",
    "prelu",
    "spatial_dropout2d",
]


# -- im2col machinery ---------------------------------------------------


def _conv_out_extent(extent, k, stride, pad, dilation):
    return (extent + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, out_h, out_w):
    """(C, Hp, Wp) padded plane stack -> (C*kh*kw, out_h*out_w) columns."""
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, i, j] = xp[:, hi : hi + stride * out_h : stride, wj : wj + stride * out_w : stride]
    return cols.reshape(c * kh * kw, out_h * out_w)


def _col2im(cols, c, hp, wp, kh, kw, stride, dilation, out_h, out_w):
    """Adjoint of _im2col: scatter-add columns back into a padded plane stack."""
    xp = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, out_h, out_w)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            xp[:, hi : hi + stride * out_h : stride, wj : wj + stride * out_w : stride] += cols[:, i, j]
    return xp


def _pad_nchw(data, pad):
    if pad == 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# -- convolutions -------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Cross-correlation of (N, C_in, H, W) with (C_out, C_in, kH, kW)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"input has {c_in} channels but weight expects {wc_in}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ContractError("stride/dilation must be >= 1 and padding >= 0")
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    if eff_h > h + 2 * padding or eff_w > w + 2 * padding:
        raise ContractError(
            f"effective kernel {eff_h}x{eff_w} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    out_h = _conv_out_extent(h, kh, stride, padding, dilation)
    out_w = _conv_out_extent(w, kw, stride, padding, dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError("non-positive output extent")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")

    w2 = weight.data.reshape(c_out, c_in * kh * kw)
    xp = _pad_nchw(x.data, padding)
    out_data = np.empty((n, c_out, out_h, out_w), dtype=x.dtype)
    for s in range(n):
        col = _im2col(xp[s], kh, kw, stride, dilation, out_h, out_w)
        out_data[s] = (w2 @ col).reshape(c_out, out_h, out_w)
    if bias is not None:
        out_data += bias.data.reshape(1, c_out, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        g_mat = g.reshape(n, c_out, out_h * out_w)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)), fresh=True)
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        dw = np.zeros_like(w2) if need_w else None
        dx = np.zeros_like(x.data) if need_x else None
        hp, wp = h + 2 * padding, w + 2 * padding
        for s in range(n):
            if need_w:
                col = _im2col(xp[s], kh, kw, stride, dilation, out_h, out_w)
                dw += g_mat[s] @ col.T
            if need_x:
                dcol = w2.T @ g_mat[s]
                dxp = _col2im(dcol, c_in, hp, wp, kh, kw, stride, dilation, out_h, out_w)
                dx[s] = dxp[:, padding : padding + h, padding : padding + w]
        if need_w:
            _accum(weight, dw.reshape(weight.shape), fresh=True)
        if need_x:
            _accum(x, dx, fresh=True)

    return Tensor._from_op(out_data, parents, rule)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Adjoint of conv2d; weight layout (C_in, C_out, kH, kW)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-d input and weight")
    n, c_in, h, w = x.shape
    wc_in, c_out, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"input has {c_in} channels but weight expects {wc_in}")
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    out_h = (h - 1) * stride - 2 * padding + kh
    out_w = (w - 1) * stride - 2 * padding + kw
    if out_h < 1 or out_w < 1:
        raise ShapeError("non-positive output extent")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")

    mat = weight.data.reshape(c_in, c_out * kh * kw)
    hp, wp = out_h + 2 * padding, out_w + 2 * padding
    out_data = np.empty((n, c_out, out_h, out_w), dtype=x.dtype)
    for s in range(n):
        colt = mat.T @ x.data[s].reshape(c_in, h * w)
        full = _col2im(colt, c_out, hp, wp, kh, kw, stride, 1, h, w)
        out_data[s] = full[:, padding : padding + out_h, padding : padding + out_w]
    if bias is not None:
        out_data += bias.data.reshape(1, c_out, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)), fresh=True)
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        gp = _pad_nchw(g, padding)
        dmat = np.zeros_like(mat) if need_w else None
        dx = np.empty_like(x.data) if need_x else None
        for s in range(n):
            col_g = _im2col(gp[s], kh, kw, stride, 1, h, w)
            if need_x:
                dx[s] = (mat @ col_g).reshape(c_in, h, w)
            if need_w:
                dmat += x.data[s].reshape(c_in, h * w) @ col_g.T
        if need_w:
            _accum(weight, dmat.reshape(weight.shape), fresh=True)
        if need_x:
            _accum(x, dx, fresh=True)

    return Tensor._from_op(out_data, parents, rule)


# -- pooling ------------------------------------------------------------


@dataclass
class PoolIndices:
    """Argmax flat offsets (within each (n, c) plane) of a 2x2/stride-2 pool."""

    offsets: np.ndarray  # int64, shape (N, C, H/2, W/2)
    input_hw: tuple


def maxpool2d(x):
    """2x2 stride-2 max pool; ties go to the first (row-major) maximum."""
    if x.ndim != 4:
        raise ShapeError("maxpool2d expects (N, C, H, W)")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"spatial extents must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx4 = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, idx4[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(oh)[:, None] + idx4 // 2
    cols = 2 * np.arange(ow)[None, :] + idx4 % 2
    offsets = (rows * w + cols).astype(np.int64)

    def rule(g):
        dx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(dx, offsets.reshape(n, c, oh * ow), g.reshape(n, c, oh * ow), axis=2)
        _accum(x, dx.reshape(n, c, h, w), fresh=True)

    out = Tensor._from_op(pooled, (x,), rule)
    return out, PoolIndices(offsets, (h, w))


def _validate_indices(indices, y_shape):
    n, c, oh, ow = y_shape
    h, w = indices.input_hw
    off = indices.offsets
    if off.shape != (n, c, oh, ow):
        raise ContractError(f"indices shape {off.shape} does not match pooled shape {(n, c, oh, ow)}")
    rows, cols = off // w, off % w
    win_rows = 2 * np.arange(oh)[:, None]
    win_cols = 2 * np.arange(ow)[None, :]
    ok = (rows >= win_rows) & (rows <= win_rows + 1) & (cols >= win_cols) & (cols <= win_cols + 1)
    if not ok.all():
        bad = np.argwhere(~ok)[0]
        raise ContractError(f"corrupt pool index outside its window at {tuple(bad)}")


def max_unpool2d(y, indices, out_hw=None):
    """Scatter pooled values back to their argmax positions, zeros elsewhere."""
    if y.ndim != 4:
        raise ShapeError("max_unpool2d expects (N, C, H, W)")
    h, w = indices.input_hw if out_hw is None else out_hw
    n, c, oh, ow = y.shape
    if (h, w) != (2 * oh, 2 * ow):
        raise ContractError(f"output extent {h}x{w} is not 2x the pooled extent {oh}x{ow}")
    _validate_indices(indices, y.shape)
    flat_idx = indices.offsets.reshape(n, c, oh * ow)
    out = np.zeros((n, c, h * w), dtype=y.dtype)
    np.put_along_axis(out, flat_idx, y.data.reshape(n, c, oh * ow), axis=2)

    def rule(g):
        gathered = np.take_along_axis(g.reshape(n, c, h * w), flat_idx, axis=2)
        _accum(y, gathered.reshape(y.shape), fresh=True)

    return Tensor._from_op(out.reshape(n, c, h, w), (y,), rule)


# -- batch normalization ------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"
    updates: int = 0
    _warned: bool = field(default=False, repr=False)


def batchnorm_state(channels, dtype=np.float64, momentum=0.1, eps=1e-5):
    return BatchNormState(
        scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        shift=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        momentum=momentum,
        eps=eps,
    )


def batchnorm2d(x, state):
    """Per-channel normalization: batch statistics in train mode, running stats in eval."""
    if x.ndim != 4:
        raise ShapeError("batchnorm2d expects (N, C, H, W)")
    n, c, h, w = x.shape
    if state.scale.shape != (c,):
        raise ShapeError(f"state is for {state.scale.shape[0]} channels, input has {c}")
    scale, shift = state.scale, state.shift
    eps = state.eps

    if state.mode == "train":
        m = n * h * w
        if m < 2:
            raise ContractError("train-mode batchnorm needs N*H*W >= 2 per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out_data = scale.data.reshape(1, c, 1, 1) * xhat + shift.data.reshape(1, c, 1, 1)
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mu
        state.running_var = (1 - mom) * state.running_var + mom * var
        state.updates += 1

        def rule(g):
            # xhat is recomputed from the retained input to avoid holding
            # a second activation-sized buffer until backward.
            xh = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
            g_sum = g.sum(axis=(0, 2, 3))
            gx_sum = (g * xh).sum(axis=(0, 2, 3))
            if shift.requires_grad:
                _accum(shift, g_sum, fresh=True)
            if scale.requires_grad:
                _accum(scale, gx_sum, fresh=True)
            if x.requires_grad:
                coef = (scale.data * inv).reshape(1, c, 1, 1)
                dx = coef * (g - (g_sum / m).reshape(1, c, 1, 1) - xh * (gx_sum / m).reshape(1, c, 1, 1))
                _accum(x, dx, fresh=True)

        return Tensor._from_op(out_data, (x, scale, shift), rule)

    if state.mode != "eval":
        raise ContractError(f"unknown batchnorm mode {state.mode!r}")
    if state.updates == 0 and not state._warned:
        warnings.warn("eval-mode batchnorm before any train-mode update; using init stats (0, 1)")
        state._warned = True
    inv = 1.0 / np.sqrt(state.running_var + eps)
    rm = state.running_mean.reshape(1, c, 1, 1)
    coef = (scale.data * inv).reshape(1, c, 1, 1)
    out_data = coef * (x.data - rm) + shift.data.reshape(1, c, 1, 1)

    def rule(g):
        if shift.requires_grad:
            _accum(shift, g.sum(axis=(0, 2, 3)), fresh=True)
        if scale.requires_grad:
            xh = (x.data - rm) * inv.reshape(1, c, 1, 1)
            _accum(scale, (g * xh).sum(axis=(0, 2, 3)), fresh=True)
        if x.requires_grad:
            _accum(x, g * coef, fresh=True)

    return Tensor._from_op(out_data, (x, scale, shift), rule)


# -- activations and regularizers ---------------------------------------


def prelu(x, slopes):
    """x where positive, per-channel slope * x elsewhere."""
    if x.ndim != 4:
        raise ShapeError("prelu expects (N, C, H, W)")
    c = x.shape[1]
    if slopes.shape != (c,):
        raise ShapeError(f"slopes shape {slopes.shape} != ({c},)")
    pos = x.data > 0
    s = slopes.data.reshape(1, c, 1, 1)
    out_data = np.where(pos, x.data, x.data * s)

    def rule(g):
        if x.requires_grad:
            _accum(x, g * np.where(pos, 1.0, s).astype(g.dtype), fresh=True)
        if slopes.requires_grad:
            ds = np.where(pos, 0.0, g * x.data).sum(axis=(0, 2, 3))
            _accum(slopes, ds.astype(slopes.dtype), fresh=True)

    return Tensor._from_op(out_data, (x, slopes), rule)


def spatial_dropout2d(x, p, seed, mode):
    """Zero whole channels with probability p (train) and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ContractError(f"unknown dropout mode {mode!r}")
    if x.ndim != 4:
        raise ShapeError("spatial_dropout2d expects (N, C, H, W)")
    n, c = x.shape[:2]
    keep = make_rng(seed).random((n, c)) >= p
    mask = (keep.astype(x.dtype) / (1.0 - p)).reshape(n, c, 1, 1)
    out_data = x.data * mask

    def rule(g):
        _accum(x, g * mask, fresh=True)

    return Tensor._from_op(out_data, (x,), rule)
