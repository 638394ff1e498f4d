"""Per-scale fusion of global-context and local-backbone features.

Each scale owns a 1x1 projection to the shared embedding width E, a
deformable 3x3 convolution whose offsets/masks are predicted from the
concatenated (global || projected-local) features, and a channel-attention
gate:

    a = sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))      (shared MLP)
    out = x * a

The MLP is a two-layer bottleneck E -> E/r -> E with ReLU in between and
reduction ratio r.  Its output layer starts at zero, so a fresh gate is
exactly 0.5 per channel while the hidden layer still receives gradient.
"""

from __future__ import annotations

import numpy as np

from . import deform, ops
from .module import Module, conv_weight, linear_weight, zeros
from .tensor import add, matmul, relu, reshape, sigmoid, concat, mul


class ChannelAttention(Module):
    def __init__(self, channels, reduction, rng):
        if channels % reduction != 0:
            raise ValueError(f"reduction ratio {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.w1 = linear_weight(rng, channels, hidden)
        self.b1 = zeros(hidden)
        self.w2 = zeros(hidden, channels)
        self.b2 = zeros(channels)
        self.channels = channels

    def _mlp(self, v):
        h = relu(add(matmul(v, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)

    def gate(self, x):
        """Attention vector a in (0,1)^(B,E) from pooled statistics."""
        b = x.shape[0]
        v_avg = reshape(ops.global_pool(x, "avg"), (b, self.channels))
        v_max = reshape(ops.global_pool(x, "max"), (b, self.channels))
        return sigmoid(add(self._mlp(v_avg), self._mlp(v_max)))

    def __call__(self, x):
        a = self.gate(x)
        return mul(x, reshape(a, (x.shape[0], self.channels, 1, 1)))


class DeformBlock(Module):
    """3x3 deformable convolution with a zero-initialized offset/mask predictor."""

    def __init__(self, cin, cout, rng):
        k = 9
        self.predictor_w = zeros(3 * k, cin, 3, 3)
        self.predictor_b = zeros(3 * k)
        self.w = conv_weight(rng, cout, cin, 3)
        self.b = zeros(cout)

    def __call__(self, x):
        offsets, masks = deform.offset_mask_predict(x, self.predictor_w, self.predictor_b)
        return deform.deform_conv2d(x, self.w, self.b, offsets, masks)


class ScaleFusionBlock(Module):
    """Aligns one backbone scale to the global grid and fuses it."""

    def __init__(self, local_channels, embed, reduction, rng):
        self.proj_w = conv_weight(rng, embed, local_channels, 1)
        self.proj_b = zeros(embed)
        self.deform = DeformBlock(2 * embed, embed, rng)
        self.attn = ChannelAttention(embed, reduction, rng)
        self.embed = embed

    def project_and_align(self, local, grid_hw):
        """1x1-project to E channels, then resize onto the global grid."""
        p = ops.conv2d(local, self.proj_w, self.proj_b)
        return ops.bilinear_resize(p, grid_hw[0], grid_hw[1])

    def fuse(self, global_feat, aligned_local):
        if global_feat.shape != aligned_local.shape:
            raise ValueError(
                f"grid mismatch: {global_feat.shape} vs {aligned_local.shape}")
        cat = concat([global_feat, aligned_local], axis=1)
        fused = self.deform(cat)
        return self.attn(fused)

    def __call__(self, global_feat, local):
        aligned = self.project_and_align(local, global_feat.shape[2:])
        return self.fuse(global_feat, aligned)
