"""Segmentation evaluation: DICE, IoU, Hausdorff percentiles, Acc/Sen/Sp.

Scores are percents. Conventions, also recorded in every report header:
both-empty DICE/IoU = 100, one-empty = 0; Hausdorff on an empty mask is
undefined (NaN) and excluded from averages; argmax ties go to the lowest
class index; mean DICE/mIoU exclude the background class; per-sample
metrics are averaged afterwards (per-case-then-average).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

REPORT_HEADER = ("per-case-then-average; background excluded from means; "
                 "argmax ties -> lowest class; both-empty score 100, "
                 "one-empty 0; empty-mask Hausdorff undefined (NaN), "
                 "excluded from means")

UNDEFINED = math.nan


def _pair(truth, pred):
    t = np.asarray(truth)
    p = np.asarray(pred)
    if t.shape != p.shape or t.ndim != 2:
        raise ValueError("masks must be 2-d arrays of equal shape")
    return t, p


def dice_score(truth, pred, cls):
    """2|A∩B| / (|A|+|B|) in percent on the binarized class masks."""
    t, p = _pair(truth, pred)
    a = t == cls
    b = p == cls
    sa = int(a.sum())
    sb = int(b.sum())
    if sa == 0 and sb == 0:
        return 100.0
    inter = int(np.logical_and(a, b).sum())
    return 200.0 * inter / (sa + sb)


def iou_score(truth, pred, cls):
    """|A∩B| / |A∪B| in percent on the binarized class masks."""
    t, p = _pair(truth, pred)
    a = t == cls
    b = p == cls
    if not a.any() and not b.any():
        return 100.0
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return 100.0 * inter / union


def directed_distances(src, dst):
    """Euclidean distance from every foreground pixel of src to the nearest
    foreground pixel of dst. Both masks boolean, same shape."""
    dist_to_dst = ndimage.distance_transform_edt(~dst)
    return dist_to_dst[src]


def _nearest_rank(sorted_vals, percentile):
    m = sorted_vals.shape[0]
    idx = math.ceil(percentile / 100.0 * m) - 1
    return float(sorted_vals[max(idx, 0)])


def hausdorff(truth, pred, cls, percentile=95.0):
    """Symmetric Hausdorff distance at a nearest-rank percentile per
    directed distance multiset. Both-empty 0; one-empty undefined."""
    t, p = _pair(truth, pred)
    a = t == cls
    b = p == cls
    ha = bool(a.any())
    hb = bool(b.any())
    if not ha and not hb:
        return 0.0
    if ha != hb:
        return UNDEFINED
    ab = np.sort(directed_distances(a, b))
    ba = np.sort(directed_distances(b, a))
    return max(_nearest_rank(ab, percentile), _nearest_rank(ba, percentile))


def hd95(truth, pred, cls):
    return hausdorff(truth, pred, cls, percentile=95.0)


def hd100(truth, pred, cls):
    return hausdorff(truth, pred, cls, percentile=100.0)


def acc_sen_sp(truth, pred):
    """Accuracy, sensitivity, specificity in percent on foreground-vs-
    background (any nonzero label is foreground). Zero denominators give
    NaN."""
    t, p = _pair(truth, pred)
    a = t != 0
    b = p != 0
    tp = int(np.logical_and(a, b).sum())
    tn = int(np.logical_and(~a, ~b).sum())
    fp = int(np.logical_and(~a, b).sum())
    fn = int(np.logical_and(a, ~b).sum())
    acc = 100.0 * (tp + tn) / (tp + tn + fp + fn)
    sen = 100.0 * tp / (tp + fn) if tp + fn else UNDEFINED
    sp = 100.0 * tn / (tn + fp) if tn + fp else UNDEFINED
    return acc, sen, sp


@dataclass
class MetricsReport:
    classes: int
    header: str = REPORT_HEADER
    # (n_samples, classes) matrices; NaN marks undefined entries
    dice: np.ndarray = field(default=None)
    iou: np.ndarray = field(default=None)
    hd95: np.ndarray = field(default=None)
    acc: float = UNDEFINED
    sen: float = UNDEFINED
    sp: float = UNDEFINED

    def _foreground(self, matrix):
        vals = matrix[:, 1:]
        if np.isnan(vals).all():
            return UNDEFINED
        return float(np.nanmean(vals))

    @property
    def mean_dice(self):
        return self._foreground(self.dice)

    @property
    def mean_iou(self):
        return self._foreground(self.iou)

    @property
    def mean_hd95(self):
        return self._foreground(self.hd95)

    def per_class_mean(self, name):
        matrix = getattr(self, name)
        out = np.full(self.classes, UNDEFINED)
        for c in range(self.classes):
            col = matrix[:, c]
            if not np.isnan(col).all():
                out[c] = np.nanmean(col)
        return out


def predictions_from_logits(logits):
    """(n, c, h, w) logits -> (n, h, w) label map; ties take the lowest
    class index (argmax returns the first maximum)."""
    arr = np.asarray(logits)
    if arr.ndim != 4:
        raise ValueError("logits must be (n, classes, h, w)")
    return arr.argmax(axis=1)


def evaluate_masks(pred, truth, classes, with_hausdorff=True):
    """Per-sample, per-class metric matrices plus binary Acc/Sen/Sp pooled
    over all pixels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ValueError("pred and truth must both be (n, h, w)")
    n = pred.shape[0]
    dice = np.zeros((n, classes))
    iou = np.zeros((n, classes))
    hd = np.full((n, classes), UNDEFINED)
    for i in range(n):
        for c in range(classes):
            dice[i, c] = dice_score(truth[i], pred[i], c)
            iou[i, c] = iou_score(truth[i], pred[i], c)
            if with_hausdorff:
                hd[i, c] = hd95(truth[i], pred[i], c)
    acc, sen, sp = acc_sen_sp(truth.reshape(n, -1), pred.reshape(n, -1))
    return MetricsReport(classes=classes, dice=dice, iou=iou, hd95=hd,
                         acc=acc, sen=sen, sp=sp)


def evaluate(pred_logits, truth, classes, with_hausdorff=True):
    return evaluate_masks(predictions_from_logits(pred_logits),
                          truth, classes, with_hausdorff=with_hausdorff)


def mean_scores(pred, truth, classes):
    """Fast (mean_dice, mean_iou) over foreground classes for validation
    loops; same averaging as MetricsReport but vectorized, no Hausdorff."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    n = pred.shape[0]
    dices = []
    ious = []
    for c in range(1, classes):
        a = (truth == c).reshape(n, -1)
        b = (pred == c).reshape(n, -1)
        sa = a.sum(axis=1)
        sb = b.sum(axis=1)
        inter = np.logical_and(a, b).sum(axis=1)
        union = np.logical_or(a, b).sum(axis=1)
        both_empty = (sa == 0) & (sb == 0)
        with np.errstate(invalid="ignore"):
            d = np.where(both_empty, 100.0, 200.0 * inter / np.maximum(sa + sb, 1))
            j = np.where(both_empty, 100.0, 100.0 * inter / np.maximum(union, 1))
        dices.append(d)
        ious.append(j)
    return float(np.mean(dices)), float(np.mean(ious))
