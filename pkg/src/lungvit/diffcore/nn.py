"""Differentiable network operations over channels-first spatial arrays.

Convolutions accept any number of spatial axes: a 3D volume batch is
``(N, C, X, Y, Z)`` and the texture embedder uses the same code on
``(N, C, H, W)`` slices.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .array import DiffArray, as_array, make_op, mean, reshape, sqrt

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _tuplify(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


# ---------------------------------------------------------------------------
# convolution kernels (plain numpy)


def _windows(xp: np.ndarray, k: Sequence[int], stride: Sequence[int]) -> np.ndarray:
    nd = len(k)
    v = sliding_window_view(xp, tuple(k), axis=tuple(range(2, 2 + nd)))
    if any(s != 1 for s in stride):
        v = v[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    return v


def _pad(x: np.ndarray, pad: Sequence[int]) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])


def conv_forward(x: np.ndarray, w: np.ndarray, stride: Sequence[int], pad: Sequence[int]) -> np.ndarray:
    nd = w.ndim - 2
    v = _windows(_pad(x, pad), w.shape[2:], stride)
    out = np.tensordot(v, w, axes=([1, *range(2 + nd, 2 + 2 * nd)], [1, *range(2, 2 + nd)]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def conv_transpose_forward(
    g: np.ndarray, w: np.ndarray, stride: Sequence[int], pad: Sequence[int], out_spatial: Sequence[int]
) -> np.ndarray:
    """Adjoint of :func:`conv_forward` with respect to its input."""
    nd = w.ndim - 2
    k = w.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, *O, C, *k)
    o_ext = g.shape[2:]
    full = [e + 2 * p for e, p in zip(out_spatial, pad)]
    res = np.zeros((g.shape[0], w.shape[1], *full), dtype=g.dtype)
    for off in itertools.product(*(range(ki) for ki in k)):
        sl = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, o_ext))
        res[(slice(None), slice(None)) + sl] += np.moveaxis(cols[(Ellipsis,) + off], -1, 1)
    if any(pad):
        res = res[(slice(None), slice(None)) + tuple(slice(p, p + e) for p, e in zip(pad, out_spatial))]
    return np.ascontiguousarray(res)


def conv_weight_grad(
    x: np.ndarray, g: np.ndarray, stride: Sequence[int], pad: Sequence[int], k: Sequence[int]
) -> np.ndarray:
    nd = len(k)
    v = _windows(_pad(x, pad), k, stride)
    sp = list(range(2, 2 + nd))
    return np.tensordot(g, v, axes=([0, *sp], [0, *sp]))


# ---------------------------------------------------------------------------
# differentiable layers


def _add_channel_bias(out: DiffArray, bias: DiffArray | None) -> DiffArray:
    if bias is None:
        return out
    bias = as_array(bias)
    return out + reshape(bias, (1, bias.shape[0]) + (1,) * (out.ndim - 2))


def conv(x: DiffArray, kernel: DiffArray, bias: DiffArray | None = None, stride=1, padding=0) -> DiffArray:
    """Cross-correlation of ``x`` (N, C, *S) with ``kernel`` (Co, C, *k)."""
    x, kernel = as_array(x), as_array(kernel)
    nd = kernel.ndim - 2
    if x.ndim != nd + 2:
        raise ValueError(f"input has {x.ndim - 2} spatial axes but kernel has {nd}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel axis mismatch: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    stride = _tuplify(stride, nd)
    pad = _tuplify(padding, nd)
    for ax in range(nd):
        span = x.shape[2 + ax] + 2 * pad[ax] - kernel.shape[2 + ax]
        if span < 0:
            raise ValueError(
                f"spatial axis {ax}: extent {x.shape[2 + ax]} with padding {pad[ax]} is smaller than kernel {kernel.shape[2 + ax]}"
            )
    xd, wd = x.data, kernel.data
    out = conv_forward(xd, wd, stride, pad)
    in_spatial = x.shape[2:]

    def bw(g):
        gx = conv_transpose_forward(g, wd, stride, pad, in_spatial) if x.requires_grad else None
        gw = conv_weight_grad(xd, g, stride, pad, wd.shape[2:]) if kernel.requires_grad else None
        return gx, gw

    return _add_channel_bias(make_op(out, (x, kernel), bw), bias)


def conv3(x, kernel, bias=None, stride=1, padding=0) -> DiffArray:
    if as_array(kernel).ndim != 5:
        raise ValueError("conv3 expects a (Co, C, k, k, k) kernel")
    return conv(x, kernel, bias, stride, padding)


def deconv(x: DiffArray, kernel: DiffArray, bias: DiffArray | None = None, stride=1, padding=0) -> DiffArray:
    """Transposed convolution; ``kernel`` is (Cin, Cout, *k).

    For a shared kernel this is the exact adjoint of :func:`conv` mapping
    Cout -> Cin channels.
    """
    x, kernel = as_array(x), as_array(kernel)
    nd = kernel.ndim - 2
    if x.ndim != nd + 2:
        raise ValueError(f"input has {x.ndim - 2} spatial axes but kernel has {nd}")
    if x.shape[1] != kernel.shape[0]:
        raise ValueError(f"channel axis mismatch: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    stride = _tuplify(stride, nd)
    pad = _tuplify(padding, nd)
    if any(s < 1 for s in stride):
        raise ValueError("stride must be >= 1")
    out_spatial = [(e - 1) * s + k - 2 * p for e, s, k, p in zip(x.shape[2:], stride, kernel.shape[2:], pad)]
    if any(e <= 0 for e in out_spatial):
        raise ValueError(f"padding {pad} leaves an empty output")
    xd, wd = x.data, kernel.data
    out = conv_transpose_forward(xd, wd, stride, pad, out_spatial)

    def bw(g):
        gx = conv_forward(g, wd, stride, pad) if x.requires_grad else None
        gw = conv_weight_grad(g, xd, stride, pad, wd.shape[2:]) if kernel.requires_grad else None
        return gx, gw

    return _add_channel_bias(make_op(out, (x, kernel), bw), bias)


def deconv3(x, kernel, bias=None, stride=1, padding=0) -> DiffArray:
    if as_array(kernel).ndim != 5:
        raise ValueError("deconv3 expects a (Cin, Cout, k, k, k) kernel")
    return deconv(x, kernel, bias, stride, padding)


def linear(x: DiffArray, weight: DiffArray, bias: DiffArray | None = None) -> DiffArray:
    """Affine map over the trailing axis; ``weight`` is (Cout, Cin)."""
    x, weight = as_array(x), as_array(weight)
    cout, cin = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"trailing extent {x.shape[-1]} does not match weight input width {cin}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    wd = weight.data
    parents: list[DiffArray] = [x, weight]
    out = x2 @ wd.T
    if bias is not None:
        bias = as_array(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ wd).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out.reshape(*lead, cout), parents, bw)


def normalize(x: DiffArray, kind: str = "layer", gain=None, shift=None, eps: float = 1e-5) -> DiffArray:
    """Zero-mean, unit-variance normalization.

    ``layer`` normalizes each vector along the trailing feature axis;
    ``instance`` normalizes each (sample, channel) map over its spatial axes.
    """
    x = as_array(x)
    if kind == "layer":
        axes: tuple[int, ...] = (x.ndim - 1,)
        pshape = (x.shape[-1],)
    elif kind == "instance":
        axes = tuple(range(2, x.ndim))
        pshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    else:
        raise ValueError(f"unknown normalization kind {kind!r}")
    if not axes or any(x.shape[a] == 0 for a in axes):
        raise ValueError("normalization over a degenerate axis")
    mu = mean(x, axes, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axes, keepdims=True)
    y = xc / sqrt(var + eps)
    if gain is not None:
        y = y * reshape(as_array(gain), pshape)
    if shift is not None:
        y = y + reshape(as_array(shift), pshape)
    return y


def relu(x: DiffArray) -> DiffArray:
    x = as_array(x)
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: DiffArray, slope: float = 0.2) -> DiffArray:
    x = as_array(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,))


def gelu(x: DiffArray) -> DiffArray:
    """Exact GELU, x * Phi(x)."""
    x = as_array(x)
    cdf = 0.5 * (1.0 + special.erf(x.data / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return make_op((x.data * cdf).astype(x.dtype), (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: DiffArray) -> DiffArray:
    x = as_array(x)
    s = special.expit(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: DiffArray, kind: str) -> DiffArray:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        from .array import tanh

        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_last(x: DiffArray) -> DiffArray:
    x = as_array(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return make_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def global_avg_pool(x: DiffArray) -> DiffArray:
    """Mean over all spatial axes: (N, C, *S) -> (N, C)."""
    x = as_array(x)
    if x.ndim < 3 or any(e < 1 for e in x.shape[2:]):
        raise ValueError("global_avg_pool needs at least one non-empty spatial axis")
    return mean(x, tuple(range(2, x.ndim)))


def avg_pool(x: DiffArray, factor: int = 2) -> DiffArray:
    """Non-overlapping block average over every spatial axis."""
    x = as_array(x)
    nd = x.ndim - 2
    shape = list(x.shape[:2])
    for e in x.shape[2:]:
        if e % factor:
            raise ValueError(f"extent {e} not divisible by pooling factor {factor}")
        shape += [e // factor, factor]
    blocks = reshape(x, shape)
    return mean(blocks, tuple(3 + 2 * i for i in range(nd)))


def resample_nearest(x: DiffArray, factor, mode: str = "down") -> DiffArray:
    """Nearest-neighbour resampling of the spatial axes of (N, C, *S).

    Downsampling keeps the first voxel of each block; upsampling replicates.
    """
    x = as_array(x)
    nd = x.ndim - 2
    f = _tuplify(factor, nd)
    if mode == "down":
        for ax, (e, fi) in enumerate(zip(x.shape[2:], f)):
            if fi < 1 or e % fi:
                raise ValueError(f"spatial axis {ax}: extent {e} is not divisible by factor {fi}")
        return x[(slice(None), slice(None)) + tuple(slice(None, None, fi) for fi in f)]
    if mode != "up":
        raise ValueError(f"unknown resampling mode {mode!r}")
    out = x.data
    for ax, fi in enumerate(f):
        out = np.repeat(out, fi, axis=2 + ax)

    def bw(g):
        shape = list(x.shape[:2])
        for e, fi in zip(x.shape[2:], f):
            shape += [e, fi]
        return (g.reshape(shape).sum(axis=tuple(3 + 2 * i for i in range(nd))),)

    return make_op(np.ascontiguousarray(out), (x,), bw)
