"""Differentiable neural-network primitives built on :mod:`advlab.tensor`."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ._kernels import depthwise_backward, depthwise_forward
from .tensor import DTYPE, ShapeError, Tensor, make_result


class GeometryError(ShapeError):
    """Raised when a convolution or resampling geometry is invalid."""


# -- convolution ----------------------------------------------------------------


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"invalid geometry: extent {size}, kernel {k}, stride {stride}, padding {pad}"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation with zero padding.

    ``x`` is ``[B, C_in, H, W]`` and ``w`` is ``[C_out, C_in // groups, kh, kw]``.
    Pointwise (1x1) and depthwise (``groups == C_in``) convolutions take fast
    paths; everything else goes through an im2col matrix product.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    B, C_in, H, W = x.shape
    C_out, C_g, kh, kw = w.shape
    if groups < 1 or C_in % groups or C_out % groups:
        raise GeometryError(f"channels {C_in}->{C_out} not divisible by groups={groups}")
    if C_g != C_in // groups:
        raise ShapeError(f"weight expects {C_g * groups} input channels, input has {C_in}")
    Ho = _conv_out(H, kh, stride, padding)
    Wo = _conv_out(W, kw, stride, padding)
    if bias is not None and bias.shape != (C_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({C_out},)")

    xd, wd = x.data, w.data
    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        data, fn = _pointwise(xd, wd)
    elif groups == C_in and C_out == C_in:
        data, fn = _depthwise(xd, wd, stride, padding, Ho, Wo)
    else:
        data, fn = _im2col_conv(xd, wd, stride, padding, groups, Ho, Wo)

    if bias is None:
        return make_result(data, (x, w), lambda g: fn(g, x.requires_grad, w.requires_grad))
    data += bias.data[None, :, None, None]

    def fn_b(g):
        gx, gw = fn(g, x.requires_grad, w.requires_grad)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(data, (x, w, bias), fn_b)


def _pointwise(xd, wd):
    B, C_in, H, W = xd.shape
    C_out = wd.shape[0]
    w2 = wd.reshape(C_out, C_in)
    x3 = xd.reshape(B, C_in, H * W)
    data = (w2 @ x3).reshape(B, C_out, H, W)

    def fn(g, need_x, need_w):
        g3 = g.reshape(B, C_out, H * W)
        gx = (w2.T @ g3).reshape(xd.shape) if need_x else None
        gw = None
        if need_w:
            gw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(wd.shape)
        return gx, gw

    return data, fn


def _padded(xd, padding):
    if padding == 0:
        return xd
    return np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _window(xp, i, j, stride, Ho, Wo):
    return xp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]


def _depthwise(xd, wd, stride, padding, Ho, Wo):
    xp = np.ascontiguousarray(_padded(xd, padding))
    data = depthwise_forward(xp, wd, stride, Ho, Wo)

    def fn(g, need_x, need_w):
        gxp, gw = depthwise_backward(np.ascontiguousarray(g), xp, wd, stride, need_x, need_w)
        gx = None
        if need_x:
            gx = gxp[:, :, padding:padding + xd.shape[2], padding:padding + xd.shape[3]]
        return gx, (gw if need_w else None)

    return data, fn


def _im2col_conv(xd, wd, stride, padding, groups, Ho, Wo):
    B, C_in, H, W = xd.shape
    C_out, C_g, kh, kw = wd.shape
    O_g = C_out // groups
    xp = _padded(xd, padding)
    # cols: [B, groups, C_g * kh * kw, Ho * Wo]
    cols = np.stack(
        [_window(xp, i, j, stride, Ho, Wo) for i in range(kh) for j in range(kw)], axis=2
    ).reshape(B, groups, C_g, kh * kw, Ho * Wo).reshape(B, groups, C_g * kh * kw, Ho * Wo)
    w3 = wd.reshape(groups, O_g, C_g * kh * kw)
    data = np.matmul(w3[None], cols).reshape(B, C_out, Ho, Wo)

    def fn(g, need_x, need_w):
        g4 = g.reshape(B, groups, O_g, Ho * Wo)
        gw = None
        if need_w:
            gw = np.stack([np.tensordot(g4[:, k], cols[:, k], axes=([0, 2], [0, 2]))
                           for k in range(groups)]).reshape(wd.shape)
        gx = None
        if need_x:
            gcols = np.matmul(np.swapaxes(w3, 1, 2)[None], g4)
            gcols = gcols.reshape(B, C_in, kh * kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for idx in range(kh * kw):
                i, j = divmod(idx, kw)
                _window(gxp, i, j, stride, Ho, Wo)[...] += gcols[:, :, idx]
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return gx, gw

    return data, fn


# -- activations -----------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    data = xd * cdf

    def fn(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return make_result(data, (x,), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def fn(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return make_result(data, (x,), fn)


def layer_norm(x: Tensor, axis: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize along one axis, then apply a per-feature affine map.

    ``gamma`` and ``beta`` are 1-D with length ``x.shape[axis]``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    axis = axis % x.ndim
    n = x.shape[axis]
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    data = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        data = data + beta.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def fn(g):
        gx = gg = gb = None
        dxhat = g * gd if gd is not None else g
        if x.requires_grad:
            gx = inv * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        if gamma is not None and gamma.requires_grad:
            gg = (g * xhat).sum(axis=others)
        if beta is not None and beta.requires_grad:
            gb = g.sum(axis=others)
        return tuple(v for v, t in ((gx, x), (gg, gamma), (gb, beta)) if t is not None)

    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    return make_result(data, inputs, fn)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm)
    data = xd / denom

    def fn(g):
        proj = (g * data).sum(axis=axis, keepdims=True)
        gx = np.where(clipped, g / denom, (g - data * proj) / denom)
        return (gx,)

    return make_result(data, (x,), fn)


def clamp(x: Tensor, lo: float, hi: float, straight_through: bool = False) -> Tensor:
    """Clip to [lo, hi]. Gradient passes where lo < x < hi, or everywhere
    with ``straight_through`` so clipped values can still be pulled back."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    if straight_through:
        return make_result(out, (x,), lambda g: (g,))
    mask = (xd > lo) & (xd < hi)
    return make_result(out, (x,), lambda g: (g * mask,))


# -- structural --------------------------------------------------------------------


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along ``axis`` with strict bounds checking."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise IndexError(f"slice [{start}:{stop}] out of range for axis of length {n}")
    index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(x.ndim))
    return x[index]


def pad2d(x: Tensor, pad: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``pad`` on each side (``zero`` or ``reflect``)."""
    if pad < 0:
        raise GeometryError("negative padding")
    H, W = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    if mode == "zero":
        data = np.pad(x.data, widths)
        return make_result(data, (x,), lambda g: (g[..., pad:pad + H, pad:pad + W],))
    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    if pad >= H or pad >= W:
        raise GeometryError(f"reflect pad {pad} too large for {H}x{W}")
    rows = np.concatenate([np.arange(pad, 0, -1), np.arange(H), H - 2 - np.arange(pad)])
    cols = np.concatenate([np.arange(pad, 0, -1), np.arange(W), W - 2 - np.arange(pad)])
    return gather2d(x, rows, cols)


def pad_top_left(x: Tensor, pad: int = 1) -> Tensor:
    """Zero-pad ``pad`` rows on top and columns on the left.

    Followed by a stride-2 conv this reproduces the usual floor-mode
    "stride 2, padding 1" layer on even extents.
    """
    if pad < 0:
        raise GeometryError("negative padding")
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, 0), (pad, 0)]
    return make_result(np.pad(x.data, widths), (x,), lambda g: (g[..., pad:, pad:],))


def pad_bottom_right(x: Tensor, ph: int, pw: int) -> Tensor:
    """Reflect-pad ``ph`` rows at the bottom and ``pw`` columns at the right."""
    H, W = x.shape[-2:]
    if ph >= H or pw >= W:
        raise GeometryError(f"reflect pad ({ph}, {pw}) too large for {H}x{W}")
    rows = np.concatenate([np.arange(H), H - 2 - np.arange(ph)])
    cols = np.concatenate([np.arange(W), W - 2 - np.arange(pw)])
    return gather2d(x, rows, cols)


def gather2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select ``rows`` x ``cols`` from the last two axes (indices may repeat)."""
    data = x.data[..., rows[:, None], cols[None, :]]
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, (Ellipsis, rows[:, None], cols[None, :]), g)
        return (full,)

    return make_result(data, (x,), fn)


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double the last two extents."""
    if mode == "nearest":
        data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

        def fn(g):
            s = g.shape
            return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

        return make_result(data, (x,), fn)
    if mode == "bilinear":
        H, W = x.shape[-2:]
        mh = bilinear_matrix(H, 2 * H)
        mw = bilinear_matrix(W, 2 * W)
        return resample(x, mh, mw)
    raise ValueError(f"unknown upsample mode {mode!r}")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix [n_out, n_in] with half-pixel centres, edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def resample(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    """Separable linear resampling: out = mh @ x @ mw.T over the last two axes."""
    data = mh @ x.data @ mw.T
    return make_result(data, (x,), lambda g: (mh.T @ g @ mw,))


def avgpool2x(x: Tensor) -> Tensor:
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise GeometryError(f"avgpool2x needs even extents, got {H}x{W}")
    lead = x.shape[:-2]
    data = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

    def fn(g):
        return (0.25 * g.repeat(2, axis=-2).repeat(2, axis=-1),)

    return make_result(data, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C]."""
    return x.mean(axis=(2, 3))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with ``w`` of shape [out, in]."""
    out = x @ transpose_2d(w)
    return out + b if b is not None else out


def transpose_2d(w: Tensor) -> Tensor:
    return w.transpose(1, 0)

