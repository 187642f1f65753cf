"""Segmentation losses on raw logits.

Two routes: cross-entropy + soft dice for multi-class heads, and weighted
BCE + weighted IoU for single-channel binary heads, where the weight map
emphasizes pixels whose 31x31 neighborhood disagrees with them (boundaries).
Deep supervision combines every non-empty subset of the stage heads by
summing their logits and scoring each subset with the same combined loss.
"""

import itertools
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T

LOSS_KINDS = ("ce_dice", "bce_iou")


@dataclass
class LossConfig:
    kind: str = "ce_dice"
    ce_weight: float = 0.3
    dice_weight: float = 0.7
    smooth: float = 1.0
    boundary_weighting: bool = False
    mutation: bool = True

    def validate(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError("loss kind must be one of %s" % (LOSS_KINDS,))
        if self.smooth < 0:
            raise ValueError("smooth must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)


def one_hot(labels, classes, dtype):
    """(n, h, w) int labels -> (n, classes, h, w) indicator array."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError("labels must lie in [0, %d), got [%d, %d]"
                         % (classes, labels.min(), labels.max()))
    out = np.zeros((labels.shape[0], classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None, :, :], 1, axis=1)
    return out


def _probs_and_targets(logits, labels, smoothless_name):
    """Common head handling: softmax+one-hot for multi-class, sigmoid for
    single-channel. Returns (probs Tensor, targets numpy (n,c,h,w))."""
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError("%s: labels must be (n, h, w) matching logits %s, got %s"
                         % (smoothless_name, logits.shape, labels.shape))
    if c == 1:
        probs = T.sigmoid(logits)
        targets = labels.astype(logits.data.dtype)[:, None, :, :]
        if targets.min() < 0 or targets.max() > 1:
            raise ValueError("binary targets must lie in [0, 1]")
    else:
        probs = T.softmax_channel(logits)
        targets = one_hot(labels.astype(np.int64), c, logits.data.dtype)
    return probs, targets


def dice_loss(logits, labels, smooth=1.0):
    """1 - mean soft dice, per batch item and class.

    Multi-channel logits go through channel softmax against one-hot labels;
    single-channel logits through sigmoid against {0,1} labels.
    """
    probs, targets = _probs_and_targets(logits, labels, "dice_loss")
    y = T.Tensor(targets)
    inter = T.sum_axes(T.mul(probs, y), (2, 3))
    psum = T.sum_axes(probs, (2, 3))
    ysum = T.Tensor(targets.sum(axis=(2, 3)))
    dice = T.div(T.add_scalar(T.mul_scalar(inter, 2.0), smooth),
                 T.add_scalar(T.add(psum, ysum), smooth))
    return T.add_scalar(T.mul_scalar(T.mean_all(dice), -1.0), 1.0)


def ce_loss(logits, labels, weight_map=None):
    """Pixel cross-entropy from logits; optional per-pixel weights normalize
    by total weight."""
    n, c, h, w = logits.shape
    if c < 2:
        raise ValueError("ce_loss needs >= 2 channels; use bce_loss for binary")
    labels = np.asarray(labels, dtype=np.int64)
    onehot = one_hot(labels, c, logits.data.dtype)
    ls = T.log_softmax_channel(logits)
    nll = T.mul_scalar(T.sum_axes(T.mul(ls, T.Tensor(onehot)), (1,)), -1.0)
    if weight_map is None:
        return T.mean_all(nll)
    wm = np.asarray(weight_map, dtype=logits.data.dtype)
    if wm.shape != (n, h, w):
        raise ValueError("weight_map must be (n, h, w)")
    weighted = T.mul(nll, T.Tensor(wm))
    return T.mul_scalar(T.sum_all(weighted), 1.0 / float(wm.sum()))


def _binary_weights(logits, targets, weight_map):
    n, c, h, w = logits.shape
    if c != 1:
        raise ValueError("binary losses need single-channel logits, got %d" % c)
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape == (n, h, w):
        t = t[:, None, :, :]
    if t.shape != (n, 1, h, w):
        raise ValueError("targets must be (n, h, w) or (n, 1, h, w)")
    if weight_map is None:
        wm = np.ones_like(t)
    else:
        wm = np.asarray(weight_map, dtype=logits.data.dtype)
        if wm.shape == (n, h, w):
            wm = wm[:, None, :, :]
        if wm.shape != (n, 1, h, w):
            raise ValueError("weight_map must be (n, h, w) or (n, 1, h, w)")
    return t, wm


def bce_loss(logits, targets, weight_map=None):
    """Binary cross-entropy from logits, stable via softplus(x) - x*y;
    weights normalize per item, then batch mean."""
    t, wm = _binary_weights(logits, targets, weight_map)
    elem = T.sub(T.softplus(logits), T.mul(logits, T.Tensor(t)))
    w = T.Tensor(wm)
    num = T.sum_axes(T.mul(elem, w), (1, 2, 3))
    den = T.Tensor(wm.sum(axis=(1, 2, 3)))
    return T.mean_all(T.div(num, den))


def iou_loss(logits, targets, weight_map=None, smooth=1.0):
    """1 - weighted soft IoU per item, batch mean."""
    t, wm = _binary_weights(logits, targets, weight_map)
    p = T.sigmoid(logits)
    y = T.Tensor(t)
    w = T.Tensor(wm)
    py = T.mul(p, y)
    inter = T.sum_axes(T.mul(w, py), (1, 2, 3))
    union = T.sum_axes(T.mul(w, T.sub(T.add(p, y), py)), (1, 2, 3))
    frac = T.div(T.add_scalar(inter, smooth), T.add_scalar(union, smooth))
    return T.add_scalar(T.mul_scalar(T.mean_all(frac), -1.0), 1.0)


def boundary_weight_map(masks, radius=15, gain=5.0):
    """1 + gain * |boxblur(y) - y| with a (2*radius+1)^2 zero-padded box blur.

    masks: (n, h, w) binary numpy array. Plain numpy, not differentiated.
    """
    y = np.asarray(masks, dtype=np.float64)
    if y.ndim != 3:
        raise ValueError("masks must be (n, h, w)")
    k = 2 * radius + 1
    pad = np.pad(y, ((0, 0), (radius, radius), (radius, radius)))
    # integral image; window sums via corner differences
    ii = pad.cumsum(axis=1).cumsum(axis=2)
    ii = np.pad(ii, ((0, 0), (1, 0), (1, 0)))
    h, w = y.shape[1:]
    s = (ii[:, k:k + h, k:k + w] - ii[:, :h, k:k + w]
         - ii[:, k:k + h, :w] + ii[:, :h, :w])
    blur = s / float(k * k)
    return (1.0 + gain * np.abs(blur - y))


def combined_loss(logits, labels, config):
    """The per-prediction training loss for either route."""
    config.validate()
    if config.kind == "ce_dice":
        if logits.shape[1] < 2:
            raise ValueError("ce_dice needs multi-class logits")
        ce = ce_loss(logits, labels)
        dc = dice_loss(logits, labels, smooth=config.smooth)
        return T.add(T.mul_scalar(ce, config.ce_weight),
                     T.mul_scalar(dc, config.dice_weight))
    wm = boundary_weight_map(np.asarray(labels)) if config.boundary_weighting else None
    return T.add(bce_loss(logits, labels, weight_map=wm),
                 iou_loss(logits, labels, weight_map=wm, smooth=config.smooth))


def head_subsets(n):
    """All non-empty index subsets of range(n), size then lexicographic order."""
    if n < 1:
        raise ValueError("need at least one prediction head")
    out = []
    for size in range(1, n + 1):
        out.extend(itertools.combinations(range(n), size))
    return out


def mutation_loss(heads, labels, config):
    """Deep supervision over all 2^n - 1 head combinations.

    Each subset's logits are summed and scored with ``combined_loss``; the
    subset losses are summed. heads is a list of same-shape logit tensors.
    """
    heads = list(heads)
    subsets = head_subsets(len(heads))
    total = None
    for subset in subsets:
        combo = heads[subset[0]]
        for idx in subset[1:]:
            combo = T.add(combo, heads[idx])
        term = combined_loss(combo, labels, config)
        total = term if total is None else T.add(total, term)
    return total
