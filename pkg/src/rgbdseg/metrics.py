"""Confusion-matrix accumulation and per-class evaluation indices.

The primary score per class is n_ii / t_i (correct pixels over annotated
pixels, a per-class recall); standard IoU n_ii / (t_i + sum_j n_ji - n_ii) is
reported alongside for comparability. Classes never annotated (t_i = 0) are
reported as undefined and excluded from means, which is distinct from a
defined score of 0.0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

IGNORE_LABEL = 255


class ConfusionMatrix:
    """k x k counts: rows = annotated class, columns = predicted class."""

    def __init__(self, num_classes):
        if num_classes < 1 or num_classes > IGNORE_LABEL:
            raise ValueError(f"num_classes must be in [1, {IGNORE_LABEL}]")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def accumulate(self, predicted, truth):
        predicted = np.asarray(predicted)
        truth = np.asarray(truth)
        if predicted.shape != truth.shape:
            raise ValueError(f"label maps disagree: {predicted.shape} vs {truth.shape}")
        k = self.num_classes
        valid = truth != IGNORE_LABEL
        self.ignored += int((~valid).sum())
        t = truth[valid].astype(np.int64)
        p = predicted[valid].astype(np.int64)
        if t.size and (t.max() >= k or p.max() >= k or t.min() < 0 or p.min() < 0):
            raise ValueError(f"labels outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        self.ignored += other.ignored
        return self

    def total(self):
        return int(self.counts.sum())


@dataclass
class JaccardResult:
    per_class: np.ndarray        # n_ii / t_i, NaN where t_i = 0
    mean: float                  # over defined classes only
    iou_per_class: np.ndarray    # standard IoU, NaN where the union is empty
    iou_mean: float
    defined: np.ndarray          # bool mask of t_i > 0


def class_jaccard(cm):
    diag = np.diag(cm.counts).astype(np.float64)
    t = cm.counts.sum(axis=1).astype(np.float64)          # annotated per class
    pred = cm.counts.sum(axis=0).astype(np.float64)       # predicted per class
    defined = t > 0
    per_class = np.full(cm.num_classes, np.nan)
    per_class[defined] = diag[defined] / t[defined]
    union = t + pred - diag
    iou = np.full(cm.num_classes, np.nan)
    has_union = union > 0
    iou[has_union] = diag[has_union] / union[has_union]
    mean = float(per_class[defined].mean()) if defined.any() else float("nan")
    iou_defined = defined & has_union
    iou_mean = float(iou[iou_defined].mean()) if iou_defined.any() else float("nan")
    return JaccardResult(per_class, mean, iou, iou_mean, defined)


def pixel_accuracy(cm):
    total = cm.total()
    return float(np.diag(cm.counts).sum() / total) if total else float("nan")


def normalized_confusion(cm):
    """Row-normalized matrix; undefined rows stay zero."""
    t = cm.counts.sum(axis=1, keepdims=True)
    out = np.zeros_like(cm.counts, dtype=np.float64)
    np.divide(cm.counts, t, out=out, where=t > 0)
    return out


def report(cm, class_names):
    """Human-readable evaluation table plus the normalized confusion matrix."""
    if len(class_names) != cm.num_classes:
        raise ValueError(f"need {cm.num_classes} class names, got {len(class_names)}")
    res = class_jaccard(cm)
    t = cm.counts.sum(axis=1)
    if cm.total() == 0:
        log.warning("report: empty confusion matrix; every class is undefined")
    width = max([len(n) for n in class_names] + [5])
    lines = [f"{'class':<{width}}  {'recall(paper)':>13}  {'iou':>7}  {'t_i':>9}"]
    for i, name in enumerate(class_names):
        if res.defined[i]:
            pj, io = f"{res.per_class[i]:.4f}", f"{res.iou_per_class[i]:.4f}"
        else:
            pj, io = "undefined", "-"
        lines.append(f"{name:<{width}}  {pj:>13}  {io:>7}  {t[i]:>9}")
    lines.append(f"mean over defined classes: {res.mean:.4f} (paper), {res.iou_mean:.4f} (iou)")
    lines.append(f"pixel accuracy: {pixel_accuracy(cm):.4f}; ignored pixels: {cm.ignored}")
    lines.append("row-normalized confusion matrix:")
    norm = normalized_confusion(cm)
    for i, name in enumerate(class_names):
        row = " ".join(f"{v:.3f}" for v in norm[i])
        lines.append(f"  {name:<{width}} {row}")
    return "\n".join(lines)


def write_report(path, cm, class_names):
    """Machine-readable lines: class_index<TAB>name<TAB>paper_jaccard<TAB>iou<TAB>t_i."""
    res = class_jaccard(cm)
    t = cm.counts.sum(axis=1)
    lines = []
    for i, name in enumerate(class_names):
        lines.append(f"{i}\t{name}\t{res.per_class[i]}\t{res.iou_per_class[i]}\t{t[i]}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# label-map resampling (nearest neighbor, used at the grid/image boundary)

def resize_labels_nearest(labels, out_h, out_w):
    h, w = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return labels[rows[:, None], cols[None, :]]
