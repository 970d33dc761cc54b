"""GPM building blocks: GIG, LSAE, ASA, CRA, IRB, GPM and the GPE-Block."""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import (Activation, BatchNorm, Conv2d, GroupNorm, LayerNorm, Module, Recorder,
                 Sequential, _numel)
from .tensor import Tensor, concat


def cra_kernel_size(channels: int) -> int:
    """Odd kernel covering ceil(log2 C) + 1 neighbouring channels, at least 3."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    k = (channels - 1).bit_length() + 1  # ceil(log2 C) + 1, exact for ints
    if k % 2 == 0:
        k += 1
    return max(3, k)


def gn_groups(channels: int, cap: int = 16) -> int:
    """Largest divisor of ``channels`` not above ``cap``."""
    return max(g for g in range(1, min(cap, channels) + 1) if channels % g == 0)


class ConvBN(Sequential):
    """Bias-free conv followed by batch norm and an optional activation."""

    def __init__(self, cin, cout, kernel, stride=1, padding=None, groups=1, act: str | None = None):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, stride, padding, groups)
        self.bn = BatchNorm(cout)
        if act:
            self.act = Activation(act)


class GIG(Module):
    """Global Insight Generator: strip pooling + depthwise conv gating.

    The two strips (H rows, W columns) are concatenated into one strip of
    length H + W, filtered by a depthwise conv of length ``kernel``, split back
    and turned into per-row and per-column sigmoid gates.
    """

    def __init__(self, channels: int, kernel: int = 7, ratio: int = 8):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"GIG kernel must be odd, got {kernel}")
        self.channels, self.kernel, self.ratio = channels, kernel, ratio
        # part of the reference block definition, but no layer consumes it
        self.mip = max(8, channels // ratio)
        c = channels
        self.dw_strip = Conv2d(c, c, (kernel, 1), padding=(kernel // 2, 0), groups=c)
        self.bn = BatchNorm(c)
        self.act = Activation("h_swish")
        self.gate_h = Conv2d(c, c, (3, 1), padding=(1, 0), groups=c, bias=True)
        self.gate_w = Conv2d(c, c, (1, 3), padding=(0, 1), groups=c, bias=True)

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = x.shape[2]
        xh = ops.strip_pool(x, "height")                          # N,C,H,1
        xw = ops.strip_pool(x, "width").transpose(0, 1, 3, 2)     # N,C,W,1
        y = concat([xh, xw], axis=2)
        y = self.act(self.bn(self.dw_strip(y)))
        yh = y[:, :, :h]
        yw = y[:, :, h:].transpose(0, 1, 3, 2)                    # N,C,1,W
        gh = ops.activation(self.gate_h(yh), "sigmoid")
        gw = ops.activation(self.gate_w(yw), "sigmoid")
        return gh, gw

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"GIG expects {self.channels} channels, got shape {x.shape}")
        gh, gw = self.gates(x)
        return x * gh * gw

    def trace(self, shape, rec):
        n, c, h, w = shape
        strip = self.dw_strip.trace((n, c, h + w, 1), rec)
        self.bn.trace(strip, rec)
        self.act.trace(strip, rec)
        self.gate_h.trace((n, c, h, 1), rec)
        self.gate_w.trace((n, c, 1, w), rec)
        rec.add(self, "gate", shape, shape, elementwise=2 * n * c * (h + w), suffix="sigmoid")
        return tuple(shape)


class LSAE(Module):
    """Large-Scale Attention Encoder: self-attention inside non-overlapping windows.

    Padded positions (bottom/right zero padding) take part as keys; windows
    never exchange information.
    """

    def __init__(self, channels: int, window: int | tuple[int, int] = 7, num_heads: int = 1,
                 spatial: bool = True):
        super().__init__()
        wh, ww = ops._as_pair(window)
        if wh < 1 or ww < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        if channels % num_heads:
            raise ValueError(f"{num_heads} heads do not divide {channels} channels")
        self.channels, self.window, self.num_heads, self.spatial = channels, (wh, ww), num_heads, spatial
        self.head_dim = channels // num_heads
        self.keep_attention = False
        self.last_attention: np.ndarray | None = None
        self.norm = LayerNorm(channels)
        if spatial:
            self.qk = ConvBN(channels, 2 * channels, 1)
            self.v = ConvBN(channels, channels, 1)
        else:
            self.proj = ConvBN(channels, channels, 1)

    def forward(self, x):
        x = self.norm(x)
        if not self.spatial:
            return self.proj(x)
        c, heads, dh = self.channels, self.num_heads, self.head_dim
        wh, ww = self.window
        windows, rec = ops.window_partition(x, wh, ww)
        b, tokens = windows.shape[0], wh * ww
        q, k = ops.split_channels(self.qk(windows), [c, c])
        q = q.reshape(b, heads, dh, tokens).transpose(0, 1, 3, 2)
        k = k.reshape(b, heads, dh, tokens)
        v = self.v(windows).reshape(b, heads, dh, tokens).transpose(0, 1, 3, 2)
        attn = ops.softmax_lastdim(ops.matmul_batched(q, k) * (1.0 / np.sqrt(dh)))
        if self.keep_attention:
            self.last_attention = attn.data
        out = ops.matmul_batched(attn, v)                          # b,heads,tokens,dh
        out = out.transpose(0, 1, 3, 2).reshape(b, c, wh, ww)
        return ops.window_merge(out, rec)

    def trace(self, shape, rec):
        n, c, h, w = shape
        if c != self.channels:
            raise ValueError(f"{self.path}: expected {self.channels} channels, got shape {shape}")
        self.norm.trace(shape, rec)
        if not self.spatial:
            return self.proj.trace(shape, rec)
        wh, ww = self.window
        nh, nw = -(-h // wh), -(-w // ww)
        wshape = (n * nh * nw, c, wh, ww)
        self.qk.trace(wshape, rec)
        self.v.trace(wshape, rec)
        tokens = wh * ww
        heads = n * nh * nw * self.num_heads
        macs = 2 * heads * tokens * tokens * self.head_dim
        rec.add(self, "attention", wshape, wshape, macs=macs,
                elementwise=2 * heads * tokens * tokens, suffix="attn")
        return tuple(shape)


class ASA(Module):
    """Axial Spatial Attention: per-axis 1-D conv + GN + sigmoid gates on x."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"ASA kernel must be odd, got {kernel}")
        c, g = channels, gn_groups(channels)
        self.channels = channels
        self.conv_h = Conv2d(c, c, (kernel, 1), padding=(kernel // 2, 0), groups=c, bias=True)
        self.gn_h = GroupNorm(c, g)
        self.conv_w = Conv2d(c, c, (1, kernel), padding=(0, kernel // 2), groups=c, bias=True)
        self.gn_w = GroupNorm(c, g)

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor]:
        xh = x.mean(axis=3, keepdims=True)
        xw = x.mean(axis=2, keepdims=True)
        gh = ops.activation(self.gn_h(self.conv_h(xh)), "sigmoid")
        gw = ops.activation(self.gn_w(self.conv_w(xw)), "sigmoid")
        return gh, gw

    def forward(self, x):
        gh, gw = self.gates(x)
        return x * gh * gw

    def trace(self, shape, rec):
        n, c, h, w = shape
        self.gn_h.trace(self.conv_h.trace((n, c, h, 1), rec), rec)
        self.gn_w.trace(self.conv_w.trace((n, c, 1, w), rec), rec)
        rec.add(self, "gate", shape, shape, elementwise=2 * n * c * (h + w), suffix="sigmoid")
        return tuple(shape)


class CRA(Module):
    """Channel Relational Attention: ECA-style gate with an enlarged 1-D kernel."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.kernel = k = cra_kernel_size(channels)
        # 1-D conv across the channel axis, realised as a (k, 1) conv on N x 1 x C x 1
        self.conv = Conv2d(1, 1, (k, 1), padding=(k // 2, 0))

    def gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        y = ops.pool_global_avg(x).reshape(n, 1, c, 1)
        return ops.activation(self.conv(y), "sigmoid").reshape(n, c, 1, 1)

    def forward(self, x):
        return x * self.gate(x)

    def trace(self, shape, rec):
        n, c = shape[:2]
        self.conv.trace((n, 1, c, 1), rec)
        rec.add(self, "gate", shape, shape, elementwise=2 * n * c, suffix="sigmoid")
        return tuple(shape)


class IRB(Module):
    """Inverted residual: 1x1 expand -> 3x3 depthwise -> 1x1 project.

    The skip connection is active iff stride is 1 and channels are preserved.
    """

    def __init__(self, cin: int, cout: int, expansion: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"IRB stride must be 1 or 2, got {stride}")
        hidden = cin * expansion
        self.cin, self.cout, self.expansion, self.stride = cin, cout, expansion, stride
        self.residual = stride == 1 and cin == cout
        self.expand = ConvBN(cin, hidden, 1, act="h_swish")
        self.dw = ConvBN(hidden, hidden, 3, stride=stride, padding=1, groups=hidden, act="h_swish")
        self.project = ConvBN(hidden, cout, 1)

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ValueError(f"{self.path or 'IRB'}: expected {self.cin} channels, got shape {x.shape}")
        y = self.project(self.dw(self.expand(x)))
        return x + y if self.residual else y

    def trace(self, shape, rec):
        out = self.project.trace(self.dw.trace(self.expand.trace(shape, rec), rec), rec)
        return out


class GPM(Module):
    """GIG, then a channel split into (LSAE -> ASA) and (IRB -> CRA) branches."""

    def __init__(self, channels: int, window, expansion: int, gig_kernel: int = 7,
                 use_gig: bool = True, use_lsae: bool = True, use_asa_cra: bool = True,
                 num_heads: int = 1, lsae_spatial: bool = True):
        super().__init__()
        if channels % 2:
            raise ValueError(f"GPM needs an even channel count, got {channels}")
        half = channels // 2
        self.channels, self.half = channels, half
        self.use_gig, self.use_lsae, self.use_asa_cra = use_gig, use_lsae, use_asa_cra
        if use_gig:
            self.gig = GIG(channels, gig_kernel)
        if use_lsae:
            self.lsae = LSAE(half, window, num_heads, lsae_spatial)
            if use_asa_cra:
                self.asa = ASA(half)
        self.irb = IRB(half, half, expansion)
        if use_asa_cra:
            self.cra = CRA(half)

    def branch0(self, y0: Tensor) -> Tensor:
        if not self.use_lsae:
            return y0
        y0 = self.lsae(y0)
        return self.asa(y0) if self.use_asa_cra else y0

    def branch1(self, y1: Tensor) -> Tensor:
        y1 = self.irb(y1)
        return self.cra(y1) if self.use_asa_cra else y1

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.path or 'GPM'}: expected {self.channels} channels, got shape {x.shape}")
        y = self.gig(x) if self.use_gig else x
        y0, y1 = ops.split_channels(y, [self.half, self.half])
        return ops.concat_channels([self.branch0(y0), self.branch1(y1)])

    def trace(self, shape, rec):
        n, c, h, w = shape
        if self.use_gig:
            self.gig.trace(shape, rec)
        half = (n, self.half, h, w)
        if self.use_lsae:
            self.lsae.trace(half, rec)
            if self.use_asa_cra:
                self.asa.trace(half, rec)
        self.irb.trace(half, rec)
        if self.use_asa_cra:
            self.cra.trace(half, rec)
        return tuple(shape)


class GPEBlock(Module):
    """Pre-norm dual residual: y = x + GPM(LN(x)); z = y + IRB(LN(y))."""

    def __init__(self, channels: int, window, expansion: int, **gpm_kwargs):
        super().__init__()
        self.channels = channels
        self.norm1 = LayerNorm(channels)
        self.gpm = GPM(channels, window, expansion, **gpm_kwargs)
        self.norm2 = LayerNorm(channels)
        self.irb = IRB(channels, channels, expansion)

    def forward(self, x):
        y = x + self.gpm(self.norm1(x))
        return y + self.irb(self.norm2(y))

    def trace(self, shape, rec):
        self.gpm.trace(self.norm1.trace(shape, rec), rec)
        self.irb.trace(self.norm2.trace(shape, rec), rec)
        return tuple(shape)


__all__ = ["ASA", "CRA", "ConvBN", "GIG", "GPEBlock", "GPM", "IRB", "LSAE", "Recorder",
           "cra_kernel_size", "gn_groups"]
