"""Confusion-matrix accumulation and IoU/mIoU/retention arithmetic.

The C x C integer confusion matrix (rows = ground truth, columns =
prediction) is the sole source of IoU numbers:

    IoU_c = TP / (TP + FP + FN),    mIoU = mean_c IoU_c.

Classes with TP+FP+FN == 0 are undefined; the default mIoU policy counts
them as zero (matching reporting conventions where an absent class enters
the mean as 0.00), with exclude-undefined available by flag.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

POLICY_ZERO = "count-undefined-as-zero"
POLICY_EXCLUDE = "exclude-undefined"


class ConfusionMatrix:
    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, predictions, labels, ignore_value=255):
        """Add per-pixel (ground-truth, prediction) counts, skipping ignores."""
        predictions = np.asarray(predictions)
        labels = np.asarray(labels)
        if predictions.shape != labels.shape:
            raise ValueError(f"shape mismatch {predictions.shape} vs {labels.shape}")
        mask = labels != ignore_value
        g = labels[mask].astype(np.int64)
        p = predictions[mask].astype(np.int64)
        c = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= c or p.min() < 0 or p.max() >= c):
            raise ValueError(f"class id outside [0, {c})")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self

    def total(self):
        return int(self.counts.sum())


def iou_per_class(cm):
    """Per-class IoU vector; undefined classes (no pixels involved) are NaN."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(cm.num_classes, np.nan)
    defined = denom > 0
    iou[defined] = tp[defined] / denom[defined]
    return iou


def miou(iou_vector, policy=POLICY_ZERO):
    iou_vector = np.asarray(iou_vector, dtype=np.float64)
    defined = ~np.isnan(iou_vector)
    if policy == POLICY_ZERO:
        if iou_vector.size == 0:
            raise ValueError("no classes")
        return float(np.where(defined, iou_vector, 0.0).mean())
    if policy == POLICY_EXCLUDE:
        if not defined.any():
            raise ValueError("no defined classes")
        return float(iou_vector[defined].mean())
    raise ValueError(f"unknown policy {policy!r}")


def retention(miou_target, miou_source):
    """Cross-domain retention: target-domain mIoU over source-domain mIoU."""
    if miou_source <= 0:
        raise ValueError("source mIoU must be positive")
    return miou_target / miou_source


class ClassReport:
    """Per-class IoU table with an mIoU footer; serializes to CSV as
    `class,iou` rows followed by `miou,<value>`, 4-decimal fixed format."""

    def __init__(self, names, ious, miou_value):
        if len(names) != len(ious):
            raise ValueError("names length must equal the class count")
        self.rows = list(zip(names, ious))
        self.miou = miou_value

    def to_csv(self):
        lines = ["class,iou"]
        for name, value in self.rows:
            lines.append(f"{name},{value:.4f}")
        lines.append(f"miou,{self.miou:.4f}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.splitlines() if ln]
        if not lines or lines[0] != "class,iou":
            raise DataError("malformed class report CSV")
        *body, footer = lines[1:]
        fname, fval = footer.split(",")
        if fname != "miou":
            raise DataError("class report CSV missing the miou footer")
        rows = [(ln.split(",")[0], float(ln.split(",")[1])) for ln in body]
        report = cls.__new__(cls)
        report.rows = rows
        report.miou = float(fval)
        return report


def class_report(cm, class_names, policy=POLICY_ZERO):
    if len(class_names) != cm.num_classes:
        raise ValueError(f"expected {cm.num_classes} class names, got {len(class_names)}")
    iou = iou_per_class(cm)
    score = miou(iou, policy)
    filled = np.where(np.isnan(iou), 0.0, iou)
    return ClassReport(list(class_names), [float(v) for v in filled], score)
