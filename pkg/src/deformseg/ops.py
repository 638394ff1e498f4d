"""Neural-network operators on top of the autodiff tensor core.

All spatial ops use the (B, C, H, W) layout.  Convolution is implemented
as im2col + BLAS matmul; resize as a pair of interpolation-matrix
contractions, which makes the backward pass an exact transpose.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, _accum, _node, as_tensor


def _out_extent(size, pad, k, stride):
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"non-integral output extent: size={size} pad={pad} kernel={k} stride={stride}")
    return span // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,kh,kw) plus bias (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if Cw != Cin:
        raise ValueError(f"channel mismatch: input has {Cin}, kernel expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd")
    Ho = _out_extent(H, padding, kh, stride)
    Wo = _out_extent(W, padding, kw, stride)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Cin, Ho, Wo, kh, kw) -> (B*Ho*Wo, Cin*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Cin * kh * kw)
    wmat = w.data.reshape(Cout, Cin * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, Cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        _accum(w, (gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, Cin, kh, kw)
            dxp = np.zeros((B, Cin, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, :, ky:ky + Ho * stride:stride, kx:kx + Wo * stride:stride] += \
                        dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accum(x, dxp)

    return _node(np.ascontiguousarray(out), parents, bw, "conv2d")


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Per-(sample, group) normalization with biased variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B, C, H, W = x.shape
    if C % groups != 0:
        raise ValueError(f"groups={groups} does not divide channels={C}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xg = x.data.reshape(B, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(B, C, H, W)
    out = xhat * gamma.data.reshape(1, C, 1, 1) + beta.data.reshape(1, C, 1, 1)

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            n = C // groups * H * W
            dxhat = (g * gamma.data.reshape(1, C, 1, 1)).reshape(B, groups, n)
            xc = xg - mean
            dvar = (dxhat * xc).sum(axis=2, keepdims=True) * (-0.5) * inv ** 3
            dmean = -(dxhat * inv).sum(axis=2, keepdims=True) + \
                dvar * (-2.0 / n) * xc.sum(axis=2, keepdims=True)
            dx = dxhat * inv + dvar * 2.0 * xc / n + dmean / n
            _accum(x, dx.reshape(B, C, H, W))

    return _node(out, (x, gamma, beta), bw, "group_norm")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact-erf GELU: x * Phi(x)."""
    x = as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accum(x, g * (phi + x.data * pdf))

    return _node(out, (x,), bw, "gelu")


def dropout(x, p, training, rng):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * keep

    def bw(g):
        _accum(x, g * keep)

    return _node(out, (x,), bw, "dropout")


def _resize_matrix(src, dst, dtype):
    """Interpolation matrix M (dst, src) for align-corners=false bilinear resize.

    Sample centers at (i + 0.5) * src/dst - 0.5, clamped to the valid range
    (border replication), two taps per output row.
    """
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    w_hi = pos - lo
    m = np.zeros((dst, src), dtype=np.float64)
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - w_hi)
    np.add.at(m, (rows, hi), w_hi)
    return m.astype(dtype)


def bilinear_resize(x, out_h, out_w):
    """Bilinear resample of (B,C,H,W) to (B,C,out_h,out_w)."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    if out_h == H and out_w == W:
        return x
    R = _resize_matrix(H, out_h, x.dtype)
    Cm = _resize_matrix(W, out_w, x.dtype)
    t = np.einsum("ih,bchw->bciw", R, x.data, optimize=True)
    out = np.einsum("jw,bciw->bcij", Cm, t, optimize=True)

    def bw(g):
        gt = np.einsum("jw,bcij->bciw", Cm, g, optimize=True)
        _accum(x, np.einsum("ih,bciw->bchw", R, gt, optimize=True))

    return _node(out, (x,), bw, "bilinear_resize")


def global_pool(x, kind):
    """Global 'avg' or 'max' pooling to (B,C,1,1).

    Max backward routes the gradient to the first maximal element in
    row-major order (deterministic tie-break).
    """
    x = as_tensor(x)
    B, C, H, W = x.shape
    flat = x.data.reshape(B, C, H * W)
    if kind == "avg":
        out = flat.mean(axis=2).reshape(B, C, 1, 1)

        def bw(g):
            _accum(x, np.broadcast_to(g / (H * W), (B, C, H, W)))

    elif kind == "max":
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(B, C, 1, 1)

        def bw(g):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], g.reshape(B, C, 1), axis=2)
            _accum(x, dflat.reshape(B, C, H, W))

    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return _node(out, (x,), bw, f"{kind}_pool")
