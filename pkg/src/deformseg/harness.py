"""Training and evaluation harness.

Per epoch: seeded shuffle, minibatch forward -> composite loss ->
backward -> AdamW step (cosine epoch schedule, LR multiplier 0.1 on the
backbone and 1.0 elsewhere), then an eval-mode validation pass producing
val loss and val mIoU.  Checkpoints are written at the best val mIoU and
at the end; the run log CSV grows one row per completed epoch.

Determinism contract: with a fixed seed the loss/metric sequences are
identical across runs; the wall-clock column is machine-dependent and
excluded from that contract.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import losses, metrics
from .checkpoint import save_model, load_model
from .config import ConfigBundle, ModelConfig, SceneConfig, TrainConfig
from .errors import NumericalError
from .model import SegModel
from .optim import AdamW, cosine_lr
from .tensor import backward, no_grad

RUNLOG_HEADER = "epoch,train_loss,focal,dice,lovasz,surface,val_loss,val_miou,seconds"


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    focal: float
    dice: float
    lovasz: float
    surface: float
    val_loss: float
    val_miou: float
    seconds: float

    def csv_row(self):
        return (f"{self.epoch},{self.train_loss!r},{self.focal!r},{self.dice!r},"
                f"{self.lovasz!r},{self.surface!r},{self.val_loss!r},"
                f"{self.val_miou!r},{self.seconds!r}")


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def to_csv(self):
        return "\n".join([RUNLOG_HEADER] + [r.csv_row() for r in self.records]) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    def loss_sequence(self):
        """The deterministic portion of the log (everything but wall-clock)."""
        return [(r.epoch, r.train_loss, r.focal, r.dice, r.lovasz, r.surface,
                 r.val_loss, r.val_miou) for r in self.records]


def _batches(items, batch_size):
    for i in range(0, len(items), batch_size):
        yield items[i:i + batch_size]


def _prepare(samples):
    """Normalize images once; returns (images (N,3,H,W), labels (N,H,W), ids)."""
    images = np.stack([data_mod.normalize(s.image) for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    ids = [s.id for s in samples]
    return images, labels, ids


def evaluate_model(model, samples, batch_size=2, ignore_value=data_mod.IGNORE_VALUE,
                   with_loss=False):
    """Full-split confusion matrix (plus optional mean loss) in eval mode."""
    images, labels, ids = _prepare(samples)
    cm = metrics.ConfusionMatrix(model.cfg.num_classes)
    loss_sum = 0.0
    n = len(samples)
    for sel in _batches(list(range(n)), batch_size):
        with no_grad():
            logits = model.forward(images[sel], ids=[ids[i] for i in sel], training=False)
            if with_loss:
                bundle = losses.composite_loss(logits, labels[sel], ignore_value)
                loss_sum += bundle.total.item() * len(sel)
        preds = np.argmax(logits.data, axis=1)
        for i, idx in enumerate(sel):
            cm.accumulate(preds[i], labels[idx], ignore_value)
    if with_loss:
        return cm, loss_sum / n
    return cm


def majority_baseline_miou(samples, num_classes, ignore_value=data_mod.IGNORE_VALUE):
    """mIoU of always predicting the most frequent non-ignored class."""
    labels = np.concatenate([s.labels.reshape(-1) for s in samples])
    labels = labels[labels != ignore_value]
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    majority = int(np.argmax(counts))
    cm = metrics.ConfusionMatrix(num_classes)
    for s in samples:
        cm.accumulate(np.full_like(s.labels, majority), s.labels, ignore_value)
    return metrics.miou(metrics.iou_per_class(cm))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_samples, val_samples,
          out_dir=None, scene_cfg=None, log_path=None, progress=None):
    """Fit a fresh model; returns (model, RunLog, best/final checkpoint paths)."""
    model_cfg.validate()
    train_cfg.validate()
    if not train_samples:
        raise ValueError("training split is empty")
    model = SegModel(model_cfg)
    return train_loop(model, train_cfg, train_samples, val_samples,
                      out_dir=out_dir, scene_cfg=scene_cfg, log_path=log_path,
                      progress=progress)


def train_loop(model, train_cfg, train_samples, val_samples, out_dir=None,
               scene_cfg=None, log_path=None, progress=None):
    images, labels, ids = _prepare(train_samples)
    n = len(train_samples)
    ignore = train_cfg.ignore_value

    backbone_params, rest_params = model.parameter_groups()
    optimizer = AdamW(
        [(backbone_params, train_cfg.backbone_lr_mult),
         (rest_params, train_cfg.head_lr_mult)],
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)

    drop_rng = np.random.default_rng([train_cfg.seed, 17])
    runlog = RunLog()
    bundle = ConfigBundle(model.cfg, train_cfg, scene_cfg or SceneConfig())
    best_miou = -1.0
    best_path = final_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        best_path = os.path.join(out_dir, "best.ckpt")
        final_path = os.path.join(out_dir, "final.ckpt")
        if log_path is None:
            log_path = os.path.join(out_dir, "runlog.csv")
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write(RUNLOG_HEADER + "\n")
        log_fh.flush()

    try:
        for epoch in range(train_cfg.epochs):
            t0 = time.perf_counter()
            lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.base_lr)
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
            sums = np.zeros(5)
            for batch in _batches(list(order), train_cfg.batch_size):
                logits = model.forward(images[batch], ids=[ids[i] for i in batch],
                                       training=True, rng=drop_rng)
                terms = losses.composite_loss(logits, labels[batch], ignore)
                total = terms.total.item()
                if not np.isfinite(total):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} batch {list(batch)}")
                optimizer.zero_grad()
                backward(terms.total)
                optimizer.step(lr)
                sums += np.array(terms.values()[:4] + (total,)) * len(batch)
            focal_m, dice_m, lovasz_m, surface_m, total_m = sums / n

            val_cm, val_loss = evaluate_model(
                model, val_samples, train_cfg.eval_batch_size, ignore, with_loss=True)
            val_miou = metrics.miou(metrics.iou_per_class(val_cm))
            record = EpochRecord(epoch + 1, total_m, focal_m, dice_m, lovasz_m,
                                 surface_m, val_loss, val_miou,
                                 time.perf_counter() - t0)
            runlog.append(record)
            if log_fh:
                log_fh.write(record.csv_row() + "\n")
                log_fh.flush()
            if progress:
                progress(record)
            if val_miou > best_miou:
                best_miou = val_miou
                if best_path:
                    save_model(best_path, model, bundle)
    finally:
        if log_fh:
            log_fh.close()
    if final_path:
        save_model(final_path, model, bundle)
    return model, runlog, (best_path, final_path)


def evaluate_checkpoint(ckpt_path, samples, report_path=None, batch_size=2,
                        class_names=None, policy=metrics.POLICY_ZERO):
    """Load a checkpoint, evaluate a split, and build the class report."""
    model, bundle = load_model(ckpt_path)
    cm = evaluate_model(model, samples, batch_size, bundle.train.ignore_value)
    names = class_names or list(data_mod.CLASS_NAMES[:model.cfg.num_classes])
    report = metrics.class_report(cm, names, policy)
    if report_path:
        report.save(report_path)
    return report, cm


def sensitivity_sweep(sizes, model_cfg, train_cfg, train_samples, val_samples,
                      out_csv=None, scene_cfg=None, progress=None):
    """Train one fresh model per budget on prefix subsets; shared val split.

    Returns rows of (size, final val mIoU, wall-clock seconds).
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if sizes[-1] > len(train_samples):
        raise ValueError("largest size exceeds the training split")
    rows = []
    for size in sizes:
        t0 = time.perf_counter()
        model, runlog, _ = train(model_cfg, train_cfg, train_samples[:size],
                                 val_samples, scene_cfg=scene_cfg, progress=progress)
        rows.append((size, runlog.records[-1].val_miou, time.perf_counter() - t0))
    if out_csv:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write("size,val_miou,seconds\n")
            for size, score, secs in rows:
                fh.write(f"{size},{score!r},{secs!r}\n")
    return rows


def retention_run(ckpt_path, source_samples, target_samples, batch_size=2):
    """Evaluate one checkpoint on both domains and report the mIoU ratio."""
    model, bundle = load_model(ckpt_path)
    ignore = bundle.train.ignore_value
    cm_src = evaluate_model(model, source_samples, batch_size, ignore)
    cm_tgt = evaluate_model(model, target_samples, batch_size, ignore)
    miou_src = metrics.miou(metrics.iou_per_class(cm_src))
    miou_tgt = metrics.miou(metrics.iou_per_class(cm_tgt))
    return {
        "miou_source": miou_src,
        "miou_target": miou_tgt,
        "retention": metrics.retention(miou_tgt, miou_src),
    }
