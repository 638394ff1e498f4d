"""Full segmentation network.

Two feature branches feed four per-scale fusion blocks: a frozen global
context provider on the stride-S grid (E channels) and a trainable
four-stage residual backbone (strides 4/8/16/32).  The four fused scale
features are concatenated to 4E channels and refined by three deformable
decoder stages (4E->E->E/2->E/4, group-norm groups shrinking per stage),
then a deformable 3x3 head emits class logits that are bilinearly
upsampled to input resolution.  Raw logits are returned; no softmax.

Concat order is fixed and checkpoint-asserted: fused scale 1/4, 1/8,
1/16, 1/32.  The global feature participates only inside fusion.
"""

from __future__ import annotations

import os

import numpy as np

from . import ops
from .config import ModelConfig
from .errors import DataError
from .fusion import DeformBlock, ScaleFusionBlock
from .module import Module, conv_weight, ones, zeros
from .tensor import Tensor, concat, no_grad, relu


class FrozenRandomProvider(Module):
    """Frozen stand-in for a pretrained global encoder.

    A fixed-seed linear patch embedder: non-overlapping SxS patches are
    flattened and projected to E channels with weights drawn once from a
    Philox stream.  Never trainable; identical inputs give identical
    outputs for the lifetime of the run.
    """

    frozen = True

    def __init__(self, embed, stride, seed):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
        fan_in = 3 * stride * stride
        self.weight = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(embed, fan_in)),
                             requires_grad=False)
        self.bias = Tensor(np.zeros(embed), requires_grad=False)
        self.embed = embed
        self.stride = stride

    def features(self, images, ids=None):
        b, c, h, w = images.shape
        s = self.stride
        if h % s or w % s:
            raise ValueError(f"image extents {h}x{w} not divisible by stride {s}")
        hg, wg = h // s, w // s
        patches = images.reshape(b, c, hg, s, wg, s).transpose(0, 2, 4, 1, 3, 5)
        flat = patches.reshape(b, hg * wg, c * s * s)
        emb = flat @ self.weight.data.T + self.bias.data
        feat = emb.transpose(0, 2, 1).reshape(b, self.embed, hg, wg)
        return Tensor(feat, requires_grad=False)


class FileFeatureProvider(Module):
    """Loads precomputed global features from <dir>/<sample_id>.npy."""

    frozen = True

    def __init__(self, directory, embed, stride):
        self.directory = directory
        self.embed = embed
        self.stride = stride

    def features(self, images, ids=None):
        if ids is None:
            raise DataError("file-backed provider needs sample ids")
        b, _, h, w = images.shape
        if len(ids) != b:
            raise DataError(f"got {len(ids)} ids for a batch of {b}")
        hg, wg = h // self.stride, w // self.stride
        feats = []
        for sid in ids:
            path = os.path.join(self.directory, f"{sid}.npy")
            if not os.path.exists(path):
                raise DataError(f"missing feature file {path}")
            arr = np.load(path)
            if arr.shape != (self.embed, hg, wg):
                raise DataError(
                    f"feature file {path} has shape {arr.shape}, expected {(self.embed, hg, wg)}")
            feats.append(arr)
        return Tensor(np.stack(feats), requires_grad=False)


def make_provider(cfg: ModelConfig):
    if cfg.provider == "frozen_random":
        return FrozenRandomProvider(cfg.embed_width, cfg.global_stride, cfg.provider_seed)
    if cfg.provider == "files":
        return FileFeatureProvider(cfg.provider_dir, cfg.embed_width, cfg.global_stride)
    raise ValueError(f"unknown provider {cfg.provider!r}")


class ConvGN(Module):
    """conv 3x3 -> group norm, the backbone's unit layer."""

    def __init__(self, cin, cout, groups, rng):
        self.w = conv_weight(rng, cout, cin, 3)
        self.b = zeros(cout)
        self.gamma = ones(cout)
        self.beta = zeros(cout)
        self.groups = groups

    def __call__(self, x):
        y = ops.conv2d(x, self.w, self.b, stride=1, padding=1)
        return ops.group_norm(y, self.gamma, self.beta, self.groups)


class ResidualBlock(Module):
    def __init__(self, channels, groups, rng):
        self.layer1 = ConvGN(channels, channels, groups, rng)
        self.layer2 = ConvGN(channels, channels, groups, rng)

    def __call__(self, x):
        h = relu(self.layer1(x))
        h = self.layer2(h)
        return relu(h + x)


def _halve(x):
    # align-corners=false resize to half size == exact 2x2 mean pooling
    return ops.bilinear_resize(x, x.shape[2] // 2, x.shape[3] // 2)


class DownBlock(Module):
    """Halve the grid (2x2 mean), then conv-GN-ReLU to the new width."""

    def __init__(self, cin, cout, groups, rng):
        self.conv = ConvGN(cin, cout, groups, rng)

    def __call__(self, x):
        return relu(self.conv(_halve(x)))


class LocalBackbone(Module):
    """Four-stage residual feature extractor at strides 4/8/16/32."""

    def __init__(self, channels, groups, rng):
        c0 = channels[0]
        self.stem1 = DownBlock(3, c0 // 2, groups, rng)
        self.stem2 = DownBlock(c0 // 2, c0, groups, rng)
        self.downs = [None]
        self.blocks = [ResidualBlock(c0, groups, rng)]
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.downs.append(DownBlock(cin, cout, groups, rng))
            self.blocks.append(ResidualBlock(cout, groups, rng))

    def __call__(self, x):
        h = self.stem2(self.stem1(x))
        feats = []
        for down, block in zip(self.downs, self.blocks):
            if down is not None:
                h = down(h)
            h = block(h)
            feats.append(h)
        return feats


class DecoderStage(Module):
    """deformable conv -> group norm -> GELU -> dropout."""

    def __init__(self, cin, cout, groups, drop_p, rng):
        self.deform = DeformBlock(cin, cout, rng)
        self.gamma = ones(cout)
        self.beta = zeros(cout)
        self.groups = groups
        self.drop_p = drop_p

    def __call__(self, x, training=False, rng=None):
        h = self.deform(x)
        h = ops.group_norm(h, self.gamma, self.beta, self.groups)
        h = ops.gelu(h)
        return ops.dropout(h, self.drop_p, training, rng)


class SegModel(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        rng = np.random.default_rng(cfg.init_seed)
        e = cfg.embed_width
        self.provider = make_provider(cfg)
        self.backbone = LocalBackbone(cfg.backbone_channels, cfg.backbone_groups, rng)
        self.fusion = [ScaleFusionBlock(c, e, cfg.reduction_ratio, rng)
                       for c in cfg.backbone_channels]
        self.decoder = [DecoderStage(cin, cout, g, cfg.dropout, rng)
                        for (cin, cout), g in zip(cfg.decoder_widths, cfg.gn_groups)]
        self.head = DeformBlock(e // 4, cfg.num_classes, rng)
        self.cfg = cfg

    def forward(self, images, ids=None, training=False, rng=None, trace=None):
        """images (B,3,H,W) normalized floats -> logits (B,C,H,W)."""
        images = np.asarray(images)
        b, c, h, w = images.shape
        if c != 3:
            raise ValueError("expected 3 input channels")
        if h % 32 or w % 32:
            raise ValueError(f"input extents {h}x{w} must be divisible by 32")
        if training and self.cfg.dropout > 0 and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")

        global_feat = self.provider.features(images, ids)
        locals_ = self.backbone(Tensor(images))
        fused = [blk(global_feat, loc) for blk, loc in zip(self.fusion, locals_)]
        x = concat(fused, axis=1)
        if trace is not None:
            trace["global"] = global_feat.shape
            trace["locals"] = [t.shape for t in locals_]
            trace["concat"] = x.shape
        for i, stage in enumerate(self.decoder):
            x = stage(x, training=training, rng=rng)
            if trace is not None:
                trace[f"decoder{i + 1}"] = x.shape
        logits = self.head(x)
        if trace is not None:
            trace["head"] = logits.shape
        out = ops.bilinear_resize(logits, h, w)
        if trace is not None:
            trace["logits"] = out.shape
        return out

    __call__ = forward

    def predict(self, images, ids=None):
        """Eval-mode class map (B,H,W); argmax ties break to the lowest class id."""
        with no_grad():
            logits = self.forward(images, ids=ids, training=False)
        return np.argmax(logits.data, axis=1)

    def parameter_groups(self):
        """(backbone params, everything-else params); disjoint, covers all trainables."""
        backbone = self.backbone.trainable_parameters()
        backbone_ids = {id(p) for p in backbone}
        rest = [p for p in self.trainable_parameters() if id(p) not in backbone_ids]
        total = len(self.trainable_parameters())
        if len(backbone) + len(rest) != total:
            raise AssertionError("parameter groups must partition the trainable set")
        return backbone, rest

    def state_arrays(self):
        """Ordered name -> float32 array view of every parameter (frozen included)."""
        return {name: p.data for name, p in self.named_parameters()}
