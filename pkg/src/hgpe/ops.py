"""Numeric primitives the blocks are assembled from.

All layouts are NCHW. Convolution is cross-correlation (no kernel flip).
Convolutions and matmuls accumulate in float64 and cast back to the input
dtype, so float32 inference keeps float64 sums.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .tensor import Tensor, as_tensor, concat, crop, make, pad

NORM_EPS = 1e-5

# Kink locations of the piecewise-linear activations, keyed by kind.
KINKS = {"relu6": (0.0, 6.0), "h_swish": (-3.0, 3.0)}

_mac_counters: list[dict] = []
_kink_monitors: list[dict] = []


@contextlib.contextmanager
def count_macs():
    """Accumulate multiply-accumulates executed by conv/matmul/linear calls.

    >>> with count_macs() as c:
    ...     model(x)
    >>> c["macs"]
    """
    counter = {"macs": 0}
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


@contextlib.contextmanager
def kink_monitor():
    """Track activation inputs relative to the kinks of relu6/h_swish.

    ``min_distance`` is the smallest distance of any input to a kink;
    ``signature`` digests which linear piece every input fell on, so two
    evaluations with equal signatures stayed on the same smooth branch.
    """
    mon = {"min_distance": np.inf, "digest": hashlib.blake2b(digest_size=16)}
    _kink_monitors.append(mon)
    try:
        yield mon
    finally:
        _kink_monitors.remove(mon)
        mon["signature"] = mon["digest"].hexdigest()


def _add_macs(n: int) -> None:
    for c in _mac_counters:
        c["macs"] += int(n)


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a 4-D NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``stride`` and ``padding`` accept an int or an (h, w) pair; padding is
    symmetric zero padding.
    """
    _check_4d(x, "conv2d")
    n, cin, h, w = x.shape
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-D, got shape {weight.shape}")
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ValueError(f"groups={groups} does not divide input channels {cin}")
    if cout % groups:
        raise ValueError(f"groups={groups} does not divide output channels {cout}")
    if cin // groups != cin_g:
        raise ValueError(
            f"channel axis mismatch: input has {cin} channels / {groups} groups, "
            f"weight expects {cin_g} per group")
    sh, sw = _as_pair(stride)
    ph, pw = _as_pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if ph < 0 or pw < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh:
        raise ValueError(f"height axis too small: padded height {hp} < kernel {kh}")
    if wp < kw:
        raise ValueError(f"width axis too small: padded width {wp} < kernel {kw}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    g, cout_g = groups, cout // groups
    _add_macs(n * cout * ho * wo * cin_g * kh * kw)
    if cin_g == 1 and cout_g == 1 and (sh, sw) == (1, 1) and ph < kh and pw < kw:
        return _conv_depthwise_s1(x, weight, bias, (ph, pw))
    if cin_g == 1 and cout_g == 1:
        return _conv_depthwise(x, weight, bias, (sh, sw), (ph, pw), (ho, wo))
    if kh == kw == 1 and g == 1 and (sh, sw) == (1, 1) and (ph, pw) == (0, 0):
        return _conv_pointwise(x, weight, bias)

    # im2col: gather every (channel, tap) column once, then one matmul per group
    xp = np.pad(x.data.astype(np.float64, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp.reshape(n, g, cin_g, hp, wp), (kh, kw), axis=(3, 4))
    win = win[:, :, :, ::sh, ::sw]                                  # n g c ho wo kh kw
    kdim, L = cin_g * kh * kw, ho * wo
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 5, 6, 3, 4)).reshape(n, g, kdim, L)
    wg = weight.data.astype(np.float64, copy=False).reshape(g, cout_g, kdim)
    out = np.matmul(wg, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(gout):
        gg = gout.astype(np.float64, copy=False).reshape(n, g, cout_g, L)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wg.transpose(0, 2, 1), gg).reshape(n, g, cin_g, kh, kw, ho, wo)
            gxp = np.zeros((n, g, cin_g, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gcols[:, :, :, i, j]
            gx = gxp[:, :, :, ph:ph + h, pw:pw + w].reshape(x.shape).astype(x.dtype)
        if weight.requires_grad:
            gw = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            gw = gw.reshape(weight.shape).astype(weight.dtype)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out.astype(x.dtype, copy=False), inputs, backward)


_DW_CHUNK = 1 << 16


def _tap_range(k: int, stride: int, pad: int, size: int, out: int) -> tuple[slice, slice]:
    """Output positions whose tap ``k`` lands inside the input, and the input slice it reads."""
    lo = max(0, -(-(pad - k) // stride))
    hi = min(out - 1, (size - 1 + pad - k) // stride)
    if hi < lo:
        return slice(0, 0), slice(0, 0)
    start = k + stride * lo - pad
    return slice(lo, hi + 1), slice(start, start + stride * (hi - lo) + 1, stride)


def _conv_depthwise(x, weight, bias, stride, padding, out_hw) -> Tensor:
    # one output channel per input channel: each tap adds a shifted, scaled
    # slice of the input to the part of the output it reaches (no padded copy)
    n, c, h, w = x.shape
    kh, kw = weight.shape[2:]
    (sh, sw), (ph, pw), (ho, wo) = stride, padding, out_hw
    xd = x.data.astype(np.float64, copy=False)
    wd = weight.data.astype(np.float64, copy=False).reshape(c, kh, kw)
    taps = []
    for i in range(kh):
        orow, irow = _tap_range(i, sh, ph, h, ho)
        for j in range(kw):
            ocol, icol = _tap_range(j, sw, pw, w, wo)
            taps.append((i, j, (slice(None), slice(None), orow, ocol),
                         (slice(None), slice(None), irow, icol), wd[:, i, j].reshape(1, c, 1, 1)))

    # work in batch chunks with one scratch buffer: full-size temporaries are
    # slower than the arithmetic on this path
    step = max(1, _DW_CHUNK // (c * max(ho * wo, h * w)))
    scratch = np.empty((step, c, max(ho, h), max(wo, w)))

    def accumulate(dst, src, dst_sl, src_sl):
        for b in range(0, n, step):
            d, s = dst[b:b + step], src[b:b + step]
            for _, _, osl, isl, wij in taps:
                view_d, view_s = d[dst_sl(osl, isl)], s[src_sl(osl, isl)]
                t = scratch[:view_d.shape[0], :, :view_d.shape[2], :view_d.shape[3]]
                np.multiply(view_s, wij, out=t)
                view_d += t

    out = np.zeros((n, c, ho, wo))
    accumulate(out, xd, lambda o, i: o, lambda o, i: i)
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    def backward(gout):
        g64 = gout.astype(np.float64, copy=False)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros((n, c, h, w))
            accumulate(gx, g64, lambda o, i: i, lambda o, i: o)
            gx = gx.astype(x.dtype, copy=False)
        if weight.requires_grad:
            gw = np.zeros((c, kh, kw))
            for i, j, osl, isl, _ in taps:
                gw[:, i, j] = np.einsum("nchw,nchw->c", xd[isl], g64[osl])
            gw = gw.reshape(weight.shape).astype(weight.dtype)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out.astype(x.dtype, copy=False), inputs, backward)


_FLAT_CHUNK = 1 << 17


def _dw_flat(src: np.ndarray, wk: np.ndarray, pad: tuple[int, int],
             gout: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 depthwise correlation of ``src`` with per-channel kernels ``wk`` (c, kh, kw).

    Works on cache-sized batch chunks. Each chunk is zero-padded and flattened
    so a tap is one contiguous shifted slice; output rows keep the padded
    width and the extra columns are dropped at the end. With ``gout`` given,
    returns the kernel gradient sum_{n,out} gout * shifted(src) instead.
    """
    n, c, h, w = src.shape
    _, kh, kw = wk.shape
    ph, pw = pad
    hp, wp = h + 2 * ph, w + 2 * pw
    ho, wo = hp - kh + 1, wp - kw + 1
    span = (ho - 1) * wp + wo
    step = max(1, _FLAT_CHUNK // (c * hp * wp))
    xp = np.zeros((step, c, hp, wp))
    acc = np.zeros((step, c, ho, wp))
    tmp = np.empty((step, c, span))
    taps = [(i * wp + j, wk[:, i, j].reshape(1, c, 1)) for i in range(kh) for j in range(kw)]
    if gout is None:
        out = np.empty((n, c, ho, wo))
    else:
        gw = np.zeros((c, kh * kw))
    for b in range(0, n, step):
        m = min(step, n - b)
        xp[:m, :, ph:ph + h, pw:pw + w] = src[b:b + m]
        xf = xp[:m].reshape(m, c, hp * wp)
        af = acc[:m].reshape(m, c, ho * wp)
        if gout is None:
            for t, (off, wij) in enumerate(taps):
                if t == 0:
                    np.multiply(xf[:, :, off:off + span], wij, out=af[:, :, :span])
                else:
                    np.multiply(xf[:, :, off:off + span], wij, out=tmp[:m])
                    af[:, :, :span] += tmp[:m]
            out[b:b + m] = acc[:m, :, :, :wo]
        else:
            acc[:m, :, :, :wo] = gout[b:b + m]
            for t, (off, _) in enumerate(taps):
                gw[:, t] += np.einsum("ncl,ncl->c", xf[:, :, off:off + span], af[:, :, :span])
    return out if gout is None else gw.reshape(c, kh, kw)


def _dw_same(src: np.ndarray, wk: np.ndarray) -> np.ndarray:
    """Size-preserving depthwise correlation (odd kernels, centred zero padding)."""
    out = np.empty(src.shape)
    for ch in range(src.shape[1]):
        ndimage.correlate(src[:, ch], wk[ch][None], output=out[:, ch], mode="constant")
    return out


def _conv_depthwise_s1(x, weight, bias, padding) -> Tensor:
    c, _, kh, kw = weight.shape
    ph, pw = padding
    xd = x.data.astype(np.float64, copy=False)
    wk = weight.data.astype(np.float64, copy=False).reshape(c, kh, kw)
    same = kh % 2 == 1 and kw % 2 == 1 and (ph, pw) == (kh // 2, kw // 2)
    out = _dw_same(xd, wk) if same else _dw_flat(xd, wk, padding)
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    def backward(gout):
        g64 = gout.astype(np.float64, copy=False)
        gx = gw = gb = None
        if x.requires_grad:
            # input gradient: correlate with the flipped kernel
            flipped = wk[:, ::-1, ::-1]
            gx = _dw_same(g64, flipped) if same else _dw_flat(g64, flipped, (kh - 1 - ph, kw - 1 - pw))
            gx = gx.astype(x.dtype, copy=False)
        if weight.requires_grad:
            gw = _dw_flat(xd, wk, padding, gout=g64).reshape(weight.shape).astype(weight.dtype)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out.astype(x.dtype, copy=False), inputs, backward)


def _conv_pointwise(x, weight, bias) -> Tensor:
    n, c, h, w = x.shape
    cout = weight.shape[0]
    xd = x.data.astype(np.float64, copy=False).reshape(n, c, h * w)
    wd = weight.data.astype(np.float64, copy=False).reshape(cout, c)
    out = np.matmul(wd, xd).reshape(n, cout, h, w)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(gout):
        g64 = gout.astype(np.float64, copy=False).reshape(n, cout, h * w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wd.T, g64).reshape(x.shape).astype(x.dtype)
        if weight.requires_grad:
            gw = np.tensordot(g64, xd, axes=([0, 2], [0, 2])).reshape(weight.shape).astype(weight.dtype)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out.astype(x.dtype, copy=False), inputs, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for 2-D ``x`` of shape (N, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    xd = x.data.astype(np.float64, copy=False)
    wd = weight.data.astype(np.float64, copy=False)
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    _add_macs(x.shape[0] * weight.shape[0] * weight.shape[1])

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        gb = g.sum(axis=0) if bias is not None else None
        return ((g64 @ wd).astype(x.dtype), (g64.T @ xd).astype(weight.dtype), gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out.astype(x.dtype, copy=False), inputs, backward)


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dim mismatch: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul leading dims differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    ad = a.data.astype(np.float64, copy=False)
    bd = b.data.astype(np.float64, copy=False)
    out = np.matmul(ad, bd)
    _add_macs(out.size * a.shape[-1])

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        ga = np.matmul(g64, np.swapaxes(bd, -1, -2)).astype(a.dtype)
        gb = np.matmul(np.swapaxes(ad, -1, -2), g64).astype(b.dtype)
        return ga, gb

    return make(out.astype(a.dtype, copy=False), (a, b), backward)


# ---------------------------------------------------------------------------
# pooling, softmax, activations
# ---------------------------------------------------------------------------


def strip_pool(x: Tensor, axis: str) -> Tensor:
    """Average over one spatial axis entirely.

    ``axis="height"`` keeps the rows: N x C x H x 1 (mean over W).
    ``axis="width"`` keeps the columns: N x C x 1 x W (mean over H).
    """
    _check_4d(x, "strip_pool")
    if axis == "height":
        return x.mean(axis=3, keepdims=True)
    if axis == "width":
        return x.mean(axis=2, keepdims=True)
    raise ValueError(f"strip_pool axis must be 'height' or 'width', got {axis!r}")


def pool_global_avg(x: Tensor) -> Tensor:
    _check_4d(x, "pool_global_avg")
    return x.mean(axis=(2, 3), keepdims=True)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make(y, (x,), backward)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make(out, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise sigmoid, h_swish, relu6 or silu."""
    v = x.data
    if _kink_monitors and kind in KINKS:
        d = min(float(np.abs(v - k).min()) for k in KINKS[kind])
        piece = np.searchsorted(np.asarray(KINKS[kind]), v).astype(np.uint8).tobytes()
        for mon in _kink_monitors:
            mon["min_distance"] = min(mon["min_distance"], d)
            mon["digest"].update(piece)
    # derivatives are formed lazily in backward; inference never pays for them
    if kind == "sigmoid":
        y = _sigmoid(v)

        def backward(g):
            return (g * (y * (1.0 - y)),)
    elif kind == "h_swish":
        v64 = v.astype(np.float64, copy=False)
        r = np.empty(v.shape)
        y = np.empty(v.shape)
        slices = _batch_slices(v.shape) if v.ndim else [...]
        for sl in slices:
            rs, ys = r[sl], y[sl]
            np.add(v64[sl], 3.0, out=rs)
            np.maximum(rs, 0.0, out=rs)
            np.minimum(rs, 6.0, out=rs)
            np.multiply(v64[sl], rs, out=ys)
            ys *= 1.0 / 6.0

        def backward(g):
            # (r + v * [0 < r < 6]) / 6: 0 below -3, 1 above 3, (2v + 3) / 6 between
            gx = np.empty(g.shape)
            for sl in slices:
                d, rs = gx[sl], r[sl]
                inner = (rs > 0.0) & (rs < 6.0)
                np.multiply(v64[sl], inner, out=d)
                d += rs
                d *= g[sl]
                d *= 1.0 / 6.0
            return (gx,)
    elif kind == "relu6":
        y = np.minimum(np.maximum(v, 0.0), 6.0)

        def backward(g):
            return (g * ((v > 0.0) & (v < 6.0)),)
    elif kind == "silu":
        s = _sigmoid(v)
        y = v * s

        def backward(g):
            return (g * (s * (1.0 + v * (1.0 - s))),)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return make(y.astype(v.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _standardize(x: Tensor, axes: tuple[int, ...], eps: float):
    """(x - mean) / sqrt(biased var + eps) over ``axes`` as a single tape node.

    Returns the output tensor plus the float64 moments (keepdims shape).
    """
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        gx = g64 - g64.mean(axis=axes, keepdims=True)
        gx -= xhat * np.mean(g64 * xhat, axis=axes, keepdims=True)
        gx *= rstd
        return (gx.astype(x.dtype, copy=False),)

    return make(xhat.astype(x.dtype, copy=False), (x,), backward), mu, var


def _batch_slices(shape: tuple[int, ...], target: int = 1 << 15):
    """Batch slices of about ``target`` elements, so chained elementwise passes stay in cache."""
    per = max(1, int(np.prod(shape[1:])))
    step = max(1, target // per)
    return [slice(i, i + step) for i in range(0, shape[0], step)]


def _batch_norm_affine(x: Tensor, weight: Tensor, bias: Tensor, eps: float):
    """Training-mode batch norm with its per-channel affine as one tape node.

    The affine reductions double as the normalizer's: with gw = sum(g * xhat)
    and gb = sum(g) per channel, gx = w * rstd * (g - gb / m - xhat * gw / m).
    The centred input xc = xhat / rstd is what gets stored.
    """
    c = x.shape[1]
    axes = (0, 2, 3)
    m = x.size // c
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (np.einsum("nchw,nchw->c", xc, xc) / m).reshape(1, c, 1, 1)
    rstd = 1.0 / np.sqrt(var + eps)
    w = weight.data.astype(np.float64, copy=False).reshape(1, c, 1, 1)
    scale = w * rstd
    shift = bias.data.reshape(1, c, 1, 1)
    out = np.empty_like(xc)
    for sl in _batch_slices(xc.shape):
        o = out[sl]
        np.multiply(xc[sl], scale, out=o)
        o += shift

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        gw = np.einsum("nchw,nchw->c", g64, xc) * rstd.reshape(c)
        gb = g64.sum(axis=axes)
        gx = None
        if x.requires_grad:
            k_xc = (-scale * rstd * gw.reshape(1, c, 1, 1) / m)
            k_0 = (-scale * gb.reshape(1, c, 1, 1) / m)
            gx = np.empty_like(g64)
            tmp = None
            for sl in _batch_slices(g64.shape):
                d = gx[sl]
                np.multiply(g64[sl], scale, out=d)
                tmp = np.multiply(xc[sl], k_xc, out=None if tmp is None or tmp.shape != d.shape else tmp)
                d += tmp
                d += k_0
            gx = gx.astype(x.dtype, copy=False)
        return gx, gw.astype(weight.dtype), gb.astype(bias.dtype)

    return make(out.astype(x.dtype, copy=False), (x, weight, bias), backward), mu, var


def normalize(x: Tensor, kind: str, weight: Tensor | None = None, bias: Tensor | None = None, *,
              running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
              training: bool = False, groups: int = 1, eps: float = NORM_EPS,
              momentum: float = 0.1) -> Tensor:
    """Batch, layer (channel axis per position) or group normalization + affine.

    Batch kind in training mode normalizes with biased batch moments and
    updates ``running_mean``/``running_var`` in place (unbiased variance);
    in inference mode it uses the running statistics.
    """
    _check_4d(x, "normalize")
    c = x.shape[1]
    if kind == "batch":
        if training:
            if weight is not None and bias is not None:
                out, mu, var = _batch_norm_affine(x, weight, bias, eps)
                weight = bias = None
            else:
                out, mu, var = _standardize(x, (0, 2, 3), eps)
            if running_mean is not None:
                count = x.size // c
                unbiased = var.reshape(c) * (count / max(count - 1, 1))
                running_mean *= 1.0 - momentum
                running_mean += momentum * mu.reshape(c)
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased
        else:
            rm = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
            rs = np.sqrt(running_var.reshape(1, c, 1, 1) + eps).astype(x.dtype)
            out = (x - rm) / rs
    elif kind == "layer":
        out = _standardize(x, (1,), eps)[0]
    elif kind == "group":
        if groups < 1 or c % groups:
            raise ValueError(f"group norm: {groups} groups do not divide {c} channels")
        n, _, h, w = x.shape
        xg = x.reshape(n, groups, c // groups, h, w)
        out = _standardize(xg, (2, 3, 4), eps)[0].reshape(n, c, h, w)
    else:
        raise ValueError(f"unknown normalization kind {kind!r}")
    if weight is not None:
        out = out * weight.reshape(1, c, 1, 1)
    if bias is not None:
        out = out + bias.reshape(1, c, 1, 1)
    return out


# ---------------------------------------------------------------------------
# windows and channel splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PadRecord:
    batch: int
    height: int
    width: int
    pad_h: int
    pad_w: int
    wh: int
    ww: int

    @property
    def grid(self) -> tuple[int, int]:
        return (self.height + self.pad_h) // self.wh, (self.width + self.pad_w) // self.ww


def window_partition(x: Tensor, wh: int, ww: int) -> tuple[Tensor, PadRecord]:
    """Split N x C x H x W into (N*nh*nw) x C x wh x ww windows, row-major.

    H and W are zero-padded at the bottom/right up to multiples of the window.
    """
    _check_4d(x, "window_partition")
    if wh < 1 or ww < 1:
        raise ValueError(f"window size must be >= 1, got ({wh}, {ww})")
    n, c, h, w = x.shape
    pad_h, pad_w = -h % wh, -w % ww
    rec = PadRecord(n, h, w, pad_h, pad_w, wh, ww)
    nh, nw = rec.grid
    xp = pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    xw = xp.reshape(n, c, nh, wh, nw, ww).transpose(0, 2, 4, 1, 3, 5)
    return xw.reshape(n * nh * nw, c, wh, ww), rec


def window_merge(windows: Tensor, rec: PadRecord) -> Tensor:
    nh, nw = rec.grid
    if windows.ndim != 4 or windows.shape[0] != rec.batch * nh * nw:
        raise ValueError(
            f"window count {windows.shape[0] if windows.ndim else None} does not match "
            f"pad record ({rec.batch} x {nh} x {nw})")
    if windows.shape[2:] != (rec.wh, rec.ww):
        raise ValueError(f"window size {windows.shape[2:]} does not match pad record "
                         f"({rec.wh}, {rec.ww})")
    c = windows.shape[1]
    x = windows.reshape(rec.batch, nh, nw, c, rec.wh, rec.ww).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(rec.batch, c, nh * rec.wh, nw * rec.ww)
    return crop(x, (rec.batch, c, rec.height, rec.width))


def split_channels(x: Tensor, parts: Sequence[int]) -> list[Tensor]:
    if sum(parts) != x.shape[1]:
        raise ValueError(f"split sizes {list(parts)} do not sum to {x.shape[1]} channels")
    if len(parts) == 1:
        return [x]
    bounds = np.cumsum([0, *parts])
    return [x[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    return concat(xs, axis=1)


__all__ = [
    "KINKS", "NORM_EPS", "PadRecord", "activation", "concat_channels", "conv2d", "count_macs",
    "kink_monitor", "linear", "log_softmax_lastdim", "matmul_batched", "normalize",
    "pool_global_avg", "softmax_lastdim", "split_channels", "strip_pool", "window_merge",
    "window_partition",
]
