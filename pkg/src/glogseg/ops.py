"""Differentiable ops over :class:`~glogseg.tensor.Tensor`.

Spatial ops take ``[C, H, W]`` or batched ``[N, C, H, W]`` inputs.
Convolutions use the cross-correlation convention (no kernel flip) and
zero padding.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, current_tape

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by forward op")
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.array(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, shape),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), back)


# -- shape ----------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def roll(a: Tensor, shifts: tuple, axes: tuple) -> Tensor:
    back = tuple(-s for s in shifts)
    return _result(np.roll(a.data, shifts, axes), (a,),
                   lambda g: (np.roll(g, back, axes),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate ``[Ci, H, W]`` (or ``[N, Ci, H, W]``) tensors along channels."""
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    spatial = parts[0].shape[-2:]
    lead = parts[0].shape[:-3]
    for p in parts:
        if p.data.ndim < 3 or p.shape[-2:] != spatial or p.shape[:-3] != lead:
            raise ValueError(f"spatial mismatch in concat: {[q.shape for q in parts]}")
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=-3), tuple(parts), back)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (equal batch shapes)."""
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _result(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is ``[D_in, D_out]``."""
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _result(out, inputs, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back)


# -- normalization ----------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5, axis: int = -3) -> Tensor:
    """Normalize over ``axis`` (channels by default), then apply ``gain``/``bias``.

    ``gain`` and ``bias`` have length equal to the normalized axis.
    """
    xd = x.data
    ax = axis % xd.ndim
    bshape = [1] * xd.ndim
    bshape[ax] = xd.shape[ax]
    gd = gain.data.reshape(bshape)
    bd = bias.data.reshape(bshape)
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    reduce_axes = tuple(i for i in range(xd.ndim) if i != ax)

    def back(g):
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=ax, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=ax, keepdims=True))
        return gx, ggain, gbias

    return _result(xhat * gd + bd, (x, gain, bias), back)


# -- convolution ------------------------------------------------------------

def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _conv_geometry(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]


def _resolve_padding(k: int, padding: Optional[int]) -> int:
    if padding is None:
        if k % 2 == 0:
            raise ValueError(f"'same' convolution needs an odd kernel, got K={k}")
        return (k - 1) // 2
    return padding


def conv2d_kernel_grad(x: np.ndarray, grad_out: np.ndarray, k: int,
                       stride: int = 1, padding: Optional[int] = None) -> np.ndarray:
    """d(loss)/d(kernel) of a conv given its input and output gradient."""
    xb, _ = _batched(np.asarray(x, dtype=np.float64))
    gb, _ = _batched(np.asarray(grad_out, dtype=np.float64))
    pad = _resolve_padding(k, padding)
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _windows(xp, k, stride, gb.shape[2], gb.shape[3])
    return np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """``[N*Ho*Wo, C*K*K]`` patch matrix of a padded batch."""
    cols = _windows(xp, k, stride, ho, wo)  # N,C,Ho,Wo,K,K
    n, c = xp.shape[:2]
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """2-D cross-correlation.

    ``kernels`` is ``[C_out, C_in, K, K]``.  With ``padding=None`` the
    kernel must be odd and ``(K-1)/2`` zeros are padded on each side, so a
    stride-1 call preserves the spatial size.
    """
    xd, squeeze = _batched(x.data)
    wd = kernels.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ValueError(f"kernels must be [C_out, C_in, K, K], got {wd.shape}")
    c_out, c_in, k, _ = wd.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"input has {xd.shape[1]} channels, kernels expect {c_in}")
    pad = _resolve_padding(k, padding)
    n, _, h, w = xd.shape
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    w2 = wd.reshape(c_out, c_in * k * k)
    pointwise = k == 1 and stride == 1 and pad == 0
    if pointwise:
        xm = xd.reshape(n, c_in, h * w)
        out = np.matmul(w2, xm).reshape(n, c_out, ho, wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        cols = _im2col(xp, k, stride, ho, wo)
        out = (cols @ w2.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gb = g[None] if squeeze else g
        if pointwise:
            gm = gb.reshape(n, c_out, h * w)
            gw = np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
            gx = np.matmul(w2.T, gm).reshape(xd.shape) if x.requires_grad else None
        else:
            g2 = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
            gw = (g2.T @ cols).reshape(wd.shape)
            gx = None
            if x.requires_grad:
                gcols = (g2 @ w2).reshape(n, ho, wo, c_in, k, k)
                gxp = np.zeros(xp.shape)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i: i + stride * (ho - 1) + 1: stride,
                            j: j + stride * (wo - 1) + 1: stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pad: pad + h, pad: pad + w] if pad else gxp
        if squeeze and gx is not None:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out[0] if squeeze else out, inputs, back)


def depthwise_conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 'same' cross-correlation; ``kernels`` is ``[C, K, K]``, K odd."""
    xd, squeeze = _batched(x.data)
    wd = kernels.data
    c, k = wd.shape[0], wd.shape[1]
    if xd.shape[1] != c:
        raise ValueError(f"input has {xd.shape[1]} channels, kernels expect {c}")
    pad = _resolve_padding(k, None)
    n, _, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros(xd.shape)
    for i in range(k):
        for j in range(k):
            out += wd[None, :, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gb = g[None] if squeeze else g
        gw = np.empty_like(wd)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gw[:, i, j] = np.einsum("nchw,nchw->c", gb, xp[:, :, i:i + h, j:j + w])
                gxp[:, :, i:i + h, j:j + w] += wd[None, :, i, j, None, None] * gb
        gx = gxp[:, :, pad:pad + h, pad:pad + w]
        if squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out[0] if squeeze else out, inputs, back)


def mean_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` spatial average."""
    xd = x.data
    h, w = xd.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"spatial size {(h, w)} not divisible by {factor}")
    lead = xd.shape[:-2]
    out = xd.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))

    def back(g):
        up = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (up / (factor * factor),)

    return _result(out, (x,), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    xd = x.data
    lead = xd.shape[:-2]
    h, w = xd.shape[-2:]
    out = np.repeat(np.repeat(xd, factor, axis=-2), factor, axis=-1)

    def back(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return _result(out, (x,), back)


# -- losses -----------------------------------------------------------------

def _class_axis_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-3, keepdims=True))
    return e / e.sum(axis=-3, keepdims=True)


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    oh = (lab[..., None, :, :] == np.arange(n_classes)[:, None, None]).astype(np.float64)
    return oh


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; logits ``[..., C, H, W]``, labels ``[..., H, W]``."""
    z = logits.data
    n_classes = z.shape[-3]
    y = _one_hot(labels, n_classes)
    zmax = z.max(axis=-3, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-3, keepdims=True))
    logp = z - lse
    n_pix = z.size // n_classes
    loss = -(y * logp).sum() / n_pix

    def back(g):
        p = np.exp(logp)
        return (g * (p - y) / n_pix,)

    return _result(np.array(loss), (logits,), back)


def dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Soft Dice loss on softmax probabilities, ``1 - mean_c dice_c``.

    Per-class sums run over all batch members and pixels.
    """
    z = logits.data
    n_classes = z.shape[-3]
    p = _class_axis_softmax(z)
    y = _one_hot(labels, n_classes)
    axes = tuple(i for i in range(z.ndim) if i != z.ndim - 3)
    inter = (p * y).sum(axis=axes)
    denom = p.sum(axis=axes) + y.sum(axis=axes)
    d = (2.0 * inter + smooth) / (denom + smooth)
    loss = 1.0 - d.mean()

    def back(g):
        shape = [1] * z.ndim
        shape[-3] = n_classes
        num = (2.0 * inter + smooth).reshape(shape)
        den = (denom + smooth).reshape(shape)
        # d(dice_c)/dp = (2 y den - num) / den^2
        gp = -(g / n_classes) * (2.0 * y * den - num) / (den * den)
        gz = p * (gp - (gp * p).sum(axis=-3, keepdims=True))
        return (gz,)

    return _result(np.array(loss), (logits,), back)
