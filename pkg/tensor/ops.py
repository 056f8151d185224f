"""Differentiable primitives used by the forecasting model."""

from __future__ import annotations

import itertools
import logging
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from exceptions import ConfigurationError, DataError, DimensionError
from tensor.core import (
    Tensor,
    as_tensor,
    concat,
    getitem,
    make_result,
    reshape,
    transpose,
    unbroadcast,
)

logger = logging.getLogger(__name__)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.values, b.values)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(out, (a, b), grad_fn, "matmul")


def convolve(
    x,
    kernel,
    rank: int = 2,
    stride: int = 1,
    padding: int = 0,
    bias=None,
) -> Tensor:
    """Channels-last cross-correlation.

    ``x`` is ``[N, *spatial, C_in]`` and ``kernel`` is ``[*k, C_in, C_out]`` with
    ``rank`` spatial axes.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if rank not in (2, 3):
        raise ConfigurationError(f"convolve supports rank 2 or 3, got {rank}")
    if x.ndim != rank + 2 or kernel.ndim != rank + 2:
        raise DimensionError(f"convolve rank {rank}: bad shapes {x.shape} and {kernel.shape}")
    ksize = kernel.shape[:rank]
    c_in, c_out = kernel.shape[rank], kernel.shape[rank + 1]
    if x.shape[-1] != c_in:
        raise DimensionError(f"convolve: input channels {x.shape[-1]} != kernel channels {c_in}")
    spatial = x.shape[1 : rank + 1]
    out_sizes = [(spatial[i] + 2 * padding - ksize[i]) // stride + 1 for i in range(rank)]
    if any(o <= 0 for o in out_sizes):
        raise ConfigurationError(
            f"convolve: non-positive output size {out_sizes} for input {spatial}, "
            f"kernel {ksize}, stride {stride}, padding {padding}"
        )

    pad_width = [(0, 0)] + [(padding, padding)] * rank + [(0, 0)]
    xp = np.pad(x.values, pad_width)
    windows = sliding_window_view(xp, ksize, axis=tuple(range(1, rank + 1)))
    windows = windows[(slice(None),) + tuple(slice(0, o * stride, stride) for o in out_sizes)]
    win_axes = [rank + 1] + [rank + 2 + i for i in range(rank)]
    ker_axes = [rank] + list(range(rank))
    out = np.tensordot(windows, kernel.values, axes=(win_axes, ker_axes))

    def grad_fn(g):
        batch_axes = list(range(rank + 1))
        gk = np.tensordot(windows, g, axes=(batch_axes, batch_axes))
        gk = np.transpose(gk, list(range(1, rank + 1)) + [0, rank + 1])
        gw = np.tensordot(g, kernel.values, axes=([rank + 1], [rank + 1]))
        gxp = np.zeros_like(xp)
        lead = (slice(None),) * (rank + 1)
        for offset in itertools.product(*(range(k) for k in ksize)):
            target = (slice(None),) + tuple(
                slice(offset[i], offset[i] + stride * (out_sizes[i] - 1) + 1, stride)
                for i in range(rank)
            )
            gxp[target] += gw[lead + offset]
        crop = (slice(None),) + tuple(slice(padding, padding + s) for s in spatial)
        return gxp[crop], gk

    result = make_result(out, (x, kernel), grad_fn, f"conv{rank}d")
    if bias is not None:
        result = result + bias
    return result


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), grad_fn, "softmax")


def log_softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), grad_fn, "log_softmax")


def group_norm(x, groups: int, eps: float = 1e-5, weight=None, bias=None) -> Tensor:
    """Normalize ``[N, ..., C]`` per sample and channel group, then apply the affine."""
    x = as_tensor(x)
    channels = x.shape[-1]
    if groups <= 0 or channels % groups:
        raise ConfigurationError(f"group_norm: {channels} channels not divisible into {groups} groups")
    n = x.shape[0]
    grouped = x.values.reshape(n, -1, groups, channels // groups)
    mu = grouped.mean(axis=(1, 3), keepdims=True)
    var = grouped.var(axis=(1, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (grouped - mu) * inv_std

    def grad_fn(g):
        gg = g.reshape(grouped.shape)
        g_mean = gg.mean(axis=(1, 3), keepdims=True)
        gx_mean = (gg * xhat).mean(axis=(1, 3), keepdims=True)
        return ((inv_std * (gg - g_mean - xhat * gx_mean)).reshape(x.shape),)

    out = make_result(xhat.reshape(x.shape), (x,), grad_fn, "group_norm")
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.values)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.maximum(x.values, 0), (x,), lambda g: (g * (x.values > 0),), "relu")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.values)

    def grad_fn(g):
        return (g * s * (1.0 + x.values * (1.0 - s)),)

    return make_result(x.values * s, (x,), grad_fn, "silu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return make_result(
        np.logaddexp(0.0, x.values), (x,), lambda g: (g * _sigmoid(x.values),), "softplus"
    )


def cumsum(x, axis: int = -1, exclusive: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.cumsum(x.values, axis=axis)
    if exclusive:
        out = out - x.values

    def grad_fn(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g if exclusive else rev,)

    return make_result(out, (x,), grad_fn, "cumsum")


def amin(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    idx = np.expand_dims(np.argmin(x.values, axis=axis), axis)

    def grad_fn(g):
        full = np.zeros_like(x.values)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_result(np.take_along_axis(x.values, idx, axis=axis).squeeze(axis), (x,), grad_fn, "amin")


# -- attention ---------------------------------------------------------------


def _row_groups(mask: Optional[np.ndarray], n_queries: int, n_keys: int):
    if mask is None:
        return [(np.arange(n_queries), np.arange(n_keys))]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_queries, n_keys):
        raise DimensionError(f"attention mask shape {mask.shape} != ({n_queries}, {n_keys})")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ConfigurationError(f"attention mask rows {empty.tolist()} have no attendable key")
    groups = {}
    for row in range(n_queries):
        groups.setdefault(mask[row].tobytes(), []).append(row)
    return [
        (np.asarray(rows), np.flatnonzero(mask[rows[0]]))
        for rows in sorted(groups.values(), key=lambda r: r[0])
    ]


def multi_head_attention(q, k, v, heads: int, mask=None, return_weights: bool = False):
    """Scaled dot-product attention over ``[B, L, D]`` inputs.

    Query rows sharing a mask pattern attend only their unmasked keys, so
    masked keys get an exact zero weight and never touch the arithmetic of
    the unmasked ones.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError(f"attention expects [B, L, D] inputs, got {q.shape}, {k.shape}, {v.shape}")
    batch, n_q, dim = q.shape
    n_k = k.shape[1]
    if k.shape != v.shape or k.shape[0] != batch or k.shape[2] != dim:
        raise DimensionError(f"attention: incompatible key/value shapes {k.shape}, {v.shape} for {q.shape}")
    if heads <= 0 or dim % heads:
        raise ConfigurationError(f"model dim {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    scale = 1.0 / np.sqrt(head_dim)

    def split(t, length):
        return transpose(reshape(t, (batch, length, heads, head_dim)), (0, 2, 1, 3))

    qh, kh, vh = split(q, n_q), split(k, n_k), split(v, n_k)
    outputs, order = [], []
    weights = np.zeros((batch, heads, n_q, n_k), dtype=q.values.dtype) if return_weights else None
    for rows, keys in _row_groups(mask, n_q, n_k):
        qg = getitem(qh, (slice(None), slice(None), rows))
        kg = getitem(kh, (slice(None), slice(None), keys))
        vg = getitem(vh, (slice(None), slice(None), keys))
        scores = matmul(qg, transpose(kg, (0, 1, 3, 2))) * scale
        attn = softmax_lastdim(scores)
        outputs.append(matmul(attn, vg))
        order.extend(rows.tolist())
        if weights is not None:
            weights[:, :, rows[:, None], keys[None, :]] = attn.values
    merged = outputs[0] if len(outputs) == 1 else concat(outputs, axis=2)
    if order != list(range(n_q)):
        merged = getitem(merged, (slice(None), slice(None), np.argsort(order)))
    out = reshape(transpose(merged, (0, 2, 1, 3)), (batch, n_q, dim))
    if return_weights:
        return out, weights
    return out


# -- sampling ----------------------------------------------------------------


def grid_sample(feat, rows, cols, fill=None) -> Tensor:
    """Bilinear gather from ``feat[H, W, C]`` at continuous cell indices.

    Cell ``(i, j)`` sits at index coordinates ``(i, j)``. Corners outside the
    map read ``fill`` (a ``[C]`` vector, zeros when omitted). Gradients flow to
    ``feat``, ``fill`` and both coordinate tensors.
    """
    feat, rows, cols = as_tensor(feat), as_tensor(rows), as_tensor(cols)
    if feat.ndim != 3:
        raise DimensionError(f"grid_sample expects [H, W, C] features, got {feat.shape}")
    if rows.shape != cols.shape:
        raise DimensionError(f"grid_sample coordinate shapes differ: {rows.shape} vs {cols.shape}")
    if not (np.all(np.isfinite(rows.values)) and np.all(np.isfinite(cols.values))):
        raise DataError("grid_sample: non-finite sample coordinates")
    height, width, channels = feat.shape
    fill_t = as_tensor(np.zeros(channels) if fill is None else fill)

    padded = np.empty((height + 2, width + 2, channels), dtype=feat.values.dtype)
    padded[...] = fill_t.values
    padded[1:-1, 1:-1] = feat.values

    pr = np.clip(rows.values + 1.0, 0.0, height + 1.0)
    pc = np.clip(cols.values + 1.0, 0.0, width + 1.0)
    i0 = np.minimum(np.floor(pr).astype(np.int64), height)
    j0 = np.minimum(np.floor(pc).astype(np.int64), width)
    fr, fc = pr - i0, pc - j0
    i1, j1 = i0 + 1, j0 + 1

    c00, c01 = padded[i0, j0], padded[i0, j1]
    c10, c11 = padded[i1, j0], padded[i1, j1]
    w00 = ((1.0 - fr) * (1.0 - fc))[..., None]
    w01 = ((1.0 - fr) * fc)[..., None]
    w10 = (fr * (1.0 - fc))[..., None]
    w11 = (fr * fc)[..., None]
    out = w00 * c00 + w01 * c01 + w10 * c10 + w11 * c11

    inside_r = ((rows.values + 1.0) > 0.0) & ((rows.values + 1.0) < height + 1.0)
    inside_c = ((cols.values + 1.0) > 0.0) & ((cols.values + 1.0) < width + 1.0)

    def grad_fn(g):
        gp = np.zeros_like(padded)
        for ii, jj, w in ((i0, j0, w00), (i0, j1, w01), (i1, j0, w10), (i1, j1, w11)):
            np.add.at(gp, (ii, jj), w * g)
        g_feat = gp[1:-1, 1:-1].copy()
        g_fill = gp.sum(axis=(0, 1)) - g_feat.sum(axis=(0, 1))
        d_fr = (1.0 - fc)[..., None] * (c10 - c00) + fc[..., None] * (c11 - c01)
        d_fc = (1.0 - fr)[..., None] * (c01 - c00) + fr[..., None] * (c11 - c10)
        g_rows = (d_fr * g).sum(axis=-1) * inside_r
        g_cols = (d_fc * g).sum(axis=-1) * inside_c
        return g_feat, g_rows, g_cols, g_fill

    return make_result(out, (feat, rows, cols, fill_t), grad_fn, "grid_sample")


def gather_trilinear(volume, coords: np.ndarray) -> Tensor:
    """Trilinear gather from ``volume[H, W, D, C]`` at fixed index coordinates ``[..., 3]``.

    Corners outside the volume contribute a zero feature.
    """
    volume = as_tensor(volume)
    if volume.ndim != 4:
        raise DimensionError(f"gather_trilinear expects [H, W, D, C], got {volume.shape}")
    coords = np.asarray(coords, dtype=np.float64)
    dims = np.array(volume.shape[:3])
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    corners = []
    for offset in itertools.product((0, 1), repeat=3):
        idx = base + np.array(offset)
        valid = np.all((idx >= 0) & (idx < dims), axis=-1)
        clipped = np.clip(idx, 0, dims - 1)
        weight = np.ones(coords.shape[:-1])
        for axis in range(3):
            weight = weight * (frac[..., axis] if offset[axis] else 1.0 - frac[..., axis])
        weight = (weight * valid).astype(volume.values.dtype)
        corners.append((clipped[..., 0], clipped[..., 1], clipped[..., 2], weight))

    out = sum(w[..., None] * volume.values[a, b, c] for a, b, c, w in corners)

    def grad_fn(g):
        gv = np.zeros_like(volume.values)
        for a, b, c, w in corners:
            np.add.at(gv, (a, b, c), w[..., None] * g)
        return (gv,)

    return make_result(out, (volume,), grad_fn, "gather_trilinear")
