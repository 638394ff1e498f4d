"""Hybrid segmentation loss: focal, soft Dice, Lovasz-Softmax, and a
distance-weighted surface term, combined with fixed weights

    total = 0.4*focal + 0.3*dice + 0.2*lovasz + 0.1*surface.

Conventions shared by all terms: labels are integer maps with 255 as the
ignore value; ignored pixels contribute neither loss nor gradient; class
means run over classes present in the (non-ignored) ground truth of the
batch.  Every term is >= 0 and reaches 0 at an exact one-hot-correct
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, absolute, add, clamp, div, log, mul, narrow,
                     one_hot, power, reshape, softmax, sub, take, tmean, tsum)

try:
    from numba import njit
except ImportError:      # pragma: no cover - numba is a soft dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

LOSS_WEIGHTS = (0.4, 0.3, 0.2, 0.1)
IGNORE_VALUE = 255

_BIG = 1e12


@njit(cache=True)
def _envelope_rows(f):
    """Felzenszwalb-Huttenlocher 1-D lower envelope applied to each row, in place.

    f holds squared distances (0 at sites, _BIG elsewhere); after the call
    f[r, q] = min_p (q - p)^2 + f_in[r, p] for every row r.
    """
    nrows, n = f.shape
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    d = np.empty(n, np.float64)
    for r in range(nrows):
        row = f[r]
        k = 0
        v[0] = 0
        z[0] = -_BIG
        z[1] = _BIG
        for q in range(1, n):
            s = ((row[q] + q * q) - (row[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
            while s <= z[k]:
                k -= 1
                s = ((row[q] + q * q) - (row[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = _BIG
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            d[q] = (q - v[k]) ** 2 + row[v[k]]
        f[r] = d
    return f


def region_boundary(mask):
    """Boundary pixels of a binary region: mask pixels 4-adjacent to a
    non-mask pixel, plus mask pixels on the image border."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def distance_transform(mask, squared=False):
    """Exact Euclidean distance from every pixel to the nearest boundary
    pixel of the region; all zeros when the region is empty.

    Separable squared EDT via the lower-envelope method, one pass per axis.
    With squared=True returns the exact integer squared distances.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    boundary = region_boundary(mask)
    if not boundary.any():
        return np.zeros((h, w), dtype=np.int64 if squared else np.float64)
    f = np.where(boundary, 0.0, _BIG)
    f = _envelope_rows(np.ascontiguousarray(f.T))
    f = _envelope_rows(np.ascontiguousarray(f.T))
    if squared:
        return np.rint(f).astype(np.int64)
    return np.sqrt(f)


def distance_map_set(labels, num_classes, ignore_value=IGNORE_VALUE):
    """Per-class boundary-distance maps D (B,C,H,W) from a label batch.

    D[b, c] is zero everywhere when class c is absent from image b; entries
    at ignored pixels are zeroed so they never contribute to sums.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    b, h, w = labels.shape
    maps = np.zeros((b, num_classes, h, w), dtype=np.float64)
    valid = labels != ignore_value
    for i in range(b):
        for c in range(num_classes):
            mask = (labels[i] == c)
            if mask.any():
                maps[i, c] = distance_transform(mask) * valid[i]
    return maps


def _flat_valid(labels, ignore_value):
    labels = np.asarray(labels)
    flat = labels.reshape(-1)
    valid_idx = np.flatnonzero(flat != ignore_value)
    if valid_idx.size == 0:
        raise ValueError("all pixels are ignored; loss is undefined")
    return flat, valid_idx


def focal_loss(logits, labels, alpha=0.25, gamma=2.0, ignore_value=IGNORE_VALUE):
    """Mean over non-ignored pixels of -alpha * (1 - p_t)^gamma * log(p_t)."""
    b, c, h, w = logits.shape
    _, valid_idx = _flat_valid(labels, ignore_value)
    probs = softmax(logits, axis=1)
    oh = one_hot(labels, c, ignore_value, dtype=logits.dtype)
    pt_map = tsum(mul(probs, oh), axis=1)                      # (B,H,W)
    pt = take(reshape(pt_map, (b * h * w,)), valid_idx)
    pt = clamp(pt, 1e-7, 1.0 - 1e-7)
    term = mul(mul(power(sub(1.0, pt), gamma), log(pt)), -alpha)
    return tmean(term)


def dice_loss(logits, labels, ignore_value=IGNORE_VALUE, eps=1e-6):
    """1 - mean soft Dice over classes present in the ground truth:
    dice_c = (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps)."""
    b, c, h, w = logits.shape
    labels = np.asarray(labels)
    _flat_valid(labels, ignore_value)
    valid = (labels != ignore_value)
    probs = softmax(logits, axis=1)
    oh = one_hot(labels, c, ignore_value, dtype=logits.dtype)
    masked = mul(probs, Tensor(valid[:, None], dtype=logits.dtype))
    inter = tsum(mul(masked, oh), axis=(0, 2, 3))              # (C,)
    psum = tsum(masked, axis=(0, 2, 3))
    gsum = oh.data.sum(axis=(0, 2, 3))
    present = np.flatnonzero(gsum > 0)
    dice = div(add(mul(inter, 2.0), eps),
               add(add(psum, Tensor(gsum, dtype=logits.dtype)), eps))
    return sub(1.0, tmean(take(dice, present)))


def _lovasz_grad(gt_sorted):
    """Jaccard-loss gradient over sorted ground-truth indicators."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    grad = jaccard.copy()
    grad[1:] = jaccard[1:] - jaccard[:-1]
    return grad


def lovasz_class_terms(logits, labels, ignore_value=IGNORE_VALUE):
    """Per-class Lovasz-Jaccard terms for every class present in the GT.

    Per class, errors are 1 - p_c at ground-truth pixels and p_c elsewhere;
    they are sorted descending (stable tie-break) and dotted with the
    Jaccard gradient of the sorted indicators.  The sort permutation is a
    constant of the backward pass.
    """
    b, c, h, w = logits.shape
    flat_labels, valid_idx = _flat_valid(labels, ignore_value)
    labels_v = flat_labels[valid_idx]
    probs = softmax(logits, axis=1)
    terms = {}
    for cls in range(c):
        gt = (labels_v == cls).astype(np.float64)
        if gt.sum() == 0:
            continue
        p = take(reshape(narrow(probs, 1, cls, 1), (b * h * w,)), valid_idx)
        # errors = gt + (1 - 2 gt) * p, affine in p
        errors = add(mul(p, Tensor(1.0 - 2.0 * gt, dtype=logits.dtype)),
                     Tensor(gt, dtype=logits.dtype))
        perm = np.argsort(-errors.data, kind="stable")
        grad = _lovasz_grad(gt[perm])
        terms[cls] = tsum(mul(take(errors, perm), Tensor(grad, dtype=logits.dtype)))
    return terms


def lovasz_softmax(logits, labels, ignore_value=IGNORE_VALUE):
    """Lovasz extension of the discrete Jaccard loss, mean over present classes."""
    terms = list(lovasz_class_terms(logits, labels, ignore_value).values())
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return mul(total, 1.0 / len(terms))


def surface_loss(logits, labels, distance_maps=None, ignore_value=IGNORE_VALUE):
    """Distance-weighted absolute probability error, normalized by total weight.

    L = sum_c sum_i D_c(i) |p_c(i) - g_c(i)| / (sum D + 1e-6), non-ignored
    pixels only; exactly zero for one-hot-correct predictions.
    """
    b, c, h, w = logits.shape
    _flat_valid(labels, ignore_value)
    if distance_maps is None:
        distance_maps = distance_map_set(labels, c, ignore_value)
    probs = softmax(logits, axis=1)
    oh = one_hot(labels, c, ignore_value, dtype=logits.dtype)
    weights = Tensor(distance_maps, dtype=logits.dtype)
    num = tsum(mul(weights, absolute(sub(probs, oh))))
    return mul(num, 1.0 / (float(distance_maps.sum()) + 1e-6))


@dataclass
class LossBundle:
    focal: Tensor
    dice: Tensor
    lovasz: Tensor
    surface: Tensor
    total: Tensor
    weights: tuple = LOSS_WEIGHTS

    def values(self):
        return (self.focal.item(), self.dice.item(), self.lovasz.item(),
                self.surface.item(), self.total.item())


def composite_loss(logits, labels, ignore_value=IGNORE_VALUE):
    """All four terms on the same logits; total is one differentiable scalar."""
    wf, wd, wl, ws = LOSS_WEIGHTS
    f = focal_loss(logits, labels, ignore_value=ignore_value)
    d = dice_loss(logits, labels, ignore_value=ignore_value)
    lv = lovasz_softmax(logits, labels, ignore_value=ignore_value)
    s = surface_loss(logits, labels, ignore_value=ignore_value)
    total = add(add(mul(f, wf), mul(d, wd)), add(mul(lv, wl), mul(s, ws)))
    return LossBundle(f, d, lv, s, total)
