"""Modulated deformable 3x3 convolution and its building blocks.

A deformable convolution samples its k-th tap at the shifted location
p0 + p_k + dp_k via bilinear interpolation, scales the sample by a
modulation mask m_k in [0, 1], then contracts with the kernel weights:

    y(p0) = sum_k  w_k * x(p0 + p_k + dp_k) * m_k

extended over input/output channels, stride 1, zero-padding 1.  Offsets
and masks come from a dedicated zero-initialized 3x3 predictor
convolution, so a fresh layer computes exactly a mask-halved standard
convolution (dp = 0, m = sigmoid(0) = 0.5).

Conventions (fixed for checkpoint portability): taps in row-major kernel
order; offset channels interleaved (drow, dcol) per tap; out-of-bounds
samples interpolate against zeros, matching the convolution's padding.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, _accum, _node, as_tensor, narrow, sigmoid

# Row-major base taps of a 3x3 kernel: (drow, dcol) displacements.
BASE_TAPS_3X3 = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)


def _corner_split(rows, cols, H, W):
    """Floor/ceil corner indices, interpolation weights, and validity masks."""
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    wr = (rows - r0).astype(rows.dtype)
    wc = (cols - c0).astype(cols.dtype)
    r0i = r0.astype(np.int64)
    c0i = c0.astype(np.int64)
    r1i = r0i + 1
    c1i = c0i + 1
    corners = []
    for ri, ci in ((r0i, c0i), (r0i, c1i), (r1i, c0i), (r1i, c1i)):
        valid = ((ri >= 0) & (ri < H) & (ci >= 0) & (ci < W))
        corners.append((np.clip(ri, 0, H - 1), np.clip(ci, 0, W - 1), valid))
    return corners, wr, wc


def _gather(fdata, ri, ci, valid):
    """fdata (B,C,H,W) at per-point indices (B,N) -> masked values (B,C,N)."""
    B = fdata.shape[0]
    bidx = np.arange(B)[:, None]
    vals = fdata[bidx, :, ri, ci]            # (B, N, C)
    vals = vals.transpose(0, 2, 1)
    return vals * valid[:, None, :]


def _sample_values(fdata, rows, cols):
    """Bilinear samples plus the context needed for the backward pass."""
    B, C, H, W = fdata.shape
    corners, wr, wc = _corner_split(rows, cols, H, W)
    v = [_gather(fdata, ri, ci, valid) for ri, ci, valid in corners]
    w00 = ((1 - wr) * (1 - wc))[:, None, :]
    w01 = ((1 - wr) * wc)[:, None, :]
    w10 = (wr * (1 - wc))[:, None, :]
    w11 = (wr * wc)[:, None, :]
    out = w00 * v[0] + w01 * v[1] + w10 * v[2] + w11 * v[3]
    return out, (corners, wr, wc, v)


def _scatter_feature_grad(shape, dtype, corners, wr, wc, dval):
    """Accumulate corner contributions of dval (B,C,N) into a (B,C,H,W) grad."""
    B, C, H, W = shape
    weights = ((1 - wr) * (1 - wc), (1 - wr) * wc, wr * (1 - wc), wr * wc)
    idx_parts = []
    val_parts = []
    ch = np.arange(C, dtype=np.int64)[None, :, None]
    bofs = (np.arange(B, dtype=np.int64) * C)[:, None, None]
    for (ri, ci, valid), wgt in zip(corners, weights):
        contrib = dval * (wgt * valid)[:, None, :]
        lin = (bofs + ch) * (H * W) + (ri * W + ci)[:, None, :]
        idx_parts.append(np.broadcast_to(lin, contrib.shape).ravel())
        val_parts.append(contrib.ravel())
    flat = np.bincount(np.concatenate(idx_parts), weights=np.concatenate(val_parts),
                       minlength=B * C * H * W)
    return flat.reshape(B, C, H, W).astype(dtype)


def _coordinate_grads(ctx, dval):
    """Per-point gradients wrt the sampling row/col coordinates."""
    corners, wr, wc, v = ctx
    wr_ = wr[:, None, :]
    wc_ = wc[:, None, :]
    dvdr = (v[2] - v[0]) * (1 - wc_) + (v[3] - v[1]) * wc_
    dvdc = (v[1] - v[0]) * (1 - wr_) + (v[3] - v[2]) * wr_
    drows = (dval * dvdr).sum(axis=1)
    dcols = (dval * dvdc).sum(axis=1)
    return drows, dcols


def bilinear_sample(feature, points):
    """Sample feature (B,C,H,W) at continuous (row, col) points (B,N,2) -> (B,C,N).

    Out-of-bounds samples interpolate against zeros; points fully outside
    [-1, H] x [-1, W] return exactly 0.  Differentiable wrt both the
    feature values and the point coordinates.
    """
    feature, points = as_tensor(feature), as_tensor(points)
    B, C, H, W = feature.shape
    if points.ndim != 3 or points.shape[0] != B or points.shape[2] != 2:
        raise ValueError(f"points must be (B,N,2), got {points.shape}")
    rows = points.data[:, :, 0]
    cols = points.data[:, :, 1]
    out, ctx = _sample_values(feature.data, rows, cols)

    def bw(g):
        if feature.requires_grad:
            corners, wr, wc, _ = ctx
            _accum(feature, _scatter_feature_grad(feature.shape, g.dtype, corners, wr, wc, g))
        if points.requires_grad:
            drows, dcols = _coordinate_grads(ctx, g)
            _accum(points, np.stack([drows, dcols], axis=2))

    return _node(out, (feature, points), bw, "bilinear_sample")


def deform_conv2d(x, w, b, offsets, masks):
    """Modulated deformable convolution, 3x3, stride 1, zero-padding 1.

    x (B,Cin,H,W); w (Cout,Cin,3,3); b (Cout,) or None;
    offsets (B,2K,H,W) interleaved (drow, dcol) per tap; masks (B,K,H,W).
    Differentiable wrt all five inputs.
    """
    x, w = as_tensor(x), as_tensor(w)
    offsets, masks = as_tensor(offsets), as_tensor(masks)
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ValueError("deformable kernels are 3x3 only")
    if Cw != Cin:
        raise ValueError(f"channel mismatch: input has {Cin}, kernel expects {Cw}")
    K = kh * kw
    if offsets.shape != (B, 2 * K, H, W):
        raise ValueError(f"offsets must be {(B, 2 * K, H, W)}, got {offsets.shape}")
    if masks.shape != (B, K, H, W):
        raise ValueError(f"masks must be {(B, K, H, W)}, got {masks.shape}")

    taps = BASE_TAPS_3X3.astype(x.dtype)
    off = offsets.data.reshape(B, K, 2, H, W)
    ii = np.arange(H, dtype=x.dtype)[None, None, :, None]
    jj = np.arange(W, dtype=x.dtype)[None, None, None, :]
    rows = (ii + taps[None, :, 0, None, None] + off[:, :, 0]).reshape(B, K * H * W)
    cols = (jj + taps[None, :, 1, None, None] + off[:, :, 1]).reshape(B, K * H * W)

    sampled_flat, ctx = _sample_values(x.data, rows, cols)          # (B, Cin, K*H*W)
    sampled = sampled_flat.reshape(B, Cin, K, H * W)
    sm = (sampled * masks.data.reshape(B, 1, K, H * W)).reshape(B, Cin * K, H * W)
    w2d = w.data.reshape(Cout, Cin * K)
    out = np.matmul(w2d, sm).reshape(B, Cout, H, W)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, Cout, 1, 1)

    parents = (x, w, offsets, masks) if b is None else (x, w, b, offsets, masks)

    def bw(g):
        g2 = g.reshape(B, Cout, H * W)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        _accum(w, np.matmul(g2, sm.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        dsm = np.matmul(w2d.T, g2).reshape(B, Cin, K, H * W)
        _accum(masks, (dsm * sampled).sum(axis=1).reshape(B, K, H, W))
        dsampled = (dsm * masks.data.reshape(B, 1, K, H * W)).reshape(B, Cin, K * H * W)
        if x.requires_grad:
            corners, wr, wc, _ = ctx
            _accum(x, _scatter_feature_grad(x.shape, g.dtype, corners, wr, wc, dsampled))
        if offsets.requires_grad:
            drows, dcols = _coordinate_grads(ctx, dsampled)
            doff = np.stack([drows.reshape(B, K, H, W), dcols.reshape(B, K, H, W)], axis=2)
            _accum(offsets, doff.reshape(B, 2 * K, H, W))

    return _node(np.ascontiguousarray(out), parents, bw, "deform_conv2d")


def offset_mask_predict(x, weight, bias, taps=9):
    """Predict offsets and masks from x with one standard 3x3 convolution.

    weight (3K,Cin,3,3), bias (3K,): the first 2K output channels are raw
    offsets, the last K pass through a sigmoid.  Zero-initialized
    predictors therefore start at dp = 0, m = 0.5 everywhere.
    """
    weight = as_tensor(weight)
    if weight.shape[0] != 3 * taps:
        raise ValueError(f"predictor must emit {3 * taps} channels, got {weight.shape[0]}")
    raw = ops.conv2d(x, weight, bias, stride=1, padding=1)
    offsets = narrow(raw, 1, 0, 2 * taps)
    masks = sigmoid(narrow(raw, 1, 2 * taps, taps))
    return offsets, masks
