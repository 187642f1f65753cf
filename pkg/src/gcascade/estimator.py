"""Estimator facade over the model, training loop and metrics.

Gives the library a fit/predict surface that slots into sklearn pipelines
and grid searches. Everything here is a thin adapter; the work happens in
the decoder, training and metrics modules.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .decoder import DecoderConfig, SegmentationModel
from .losses import LossConfig
from .metrics import mean_scores, predictions_from_logits
from .optim import OptimConfig
from .training import TrainConfig, train


def check_image_batch(X):
    """Coerce to a finite float (n, 3, h, w) batch, sides divisible by 32.

    Accepts (n, h, w) or (n, 1, h, w) grayscale input and replicates it
    across the three encoder channels.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError("images must be (n, c, h, w) or (n, h, w), got %s"
                         % (X.shape,))
    if X.shape[1] == 1:
        X = np.repeat(X, 3, axis=1)
    if X.shape[1] != 3:
        raise ValueError("expected 1 or 3 channels, got %d" % X.shape[1])
    if X.shape[2] % 32 or X.shape[3] % 32:
        raise ValueError("image sides must be multiples of 32, got %dx%d"
                         % (X.shape[2], X.shape[3]))
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_mask_batch(y, classes, image_shape=None):
    """Coerce to an int64 (n, h, w) label batch with values in [0, classes)."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError("masks must be (n, h, w), got %s" % (y.shape,))
    if image_shape is not None:
        want = (image_shape[0],) + tuple(image_shape[2:])
        if y.shape != want:
            raise ValueError("mask shape %s does not match images %s"
                             % (y.shape, want))
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.round(y)
        if not np.all(rounded == y):
            raise ValueError("masks must hold integer labels")
        y = rounded
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError("labels must lie in [0, %d), got [%d, %d]"
                         % (classes, y.min(), y.max()))
    return y


class GCascadeSegmenter(BaseEstimator):
    """Trainable semantic segmenter with the standard estimator surface.

    X is a float image batch (n, 3, h, w) in [0, 1] (grayscale accepted,
    see :func:`check_image_batch`); y is an integer mask batch (n, h, w).
    ``fit`` holds out ``validation_fraction`` of the data to track the
    validation dice recorded in ``history_``.
    """

    # sklearn contract: the constructor only stores its arguments, under
    # the same names get_params exposes; configs are built in fit.
    def __init__(self, classes=3, stage_channels=(64, 40, 16, 8), k=9,
                 variant="mr", aggregation="add", upsample="bilinear",
                 reductions=(1, 1, 1, 1), epochs=20, batch_size=10,
                 lr=4e-3, loss_kind="ce_dice", mutation=True, augment=True,
                 target_dice=0.0, validation_fraction=0.2, seed=0):
        self.classes = classes
        self.stage_channels = stage_channels
        self.k = k
        self.variant = variant
        self.aggregation = aggregation
        self.upsample = upsample
        self.reductions = reductions
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.loss_kind = loss_kind
        self.mutation = mutation
        self.augment = augment
        self.target_dice = target_dice
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _decoder_config(self):
        return DecoderConfig(classes=self.classes,
                             stage_channels=tuple(self.stage_channels),
                             k=self.k, variant=self.variant,
                             aggregation=self.aggregation,
                             upsample=self.upsample,
                             reductions=tuple(self.reductions))

    def fit(self, X, y):
        X = check_image_batch(X)
        y = check_mask_batch(y, self.classes, X.shape)
        n = X.shape[0]
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in [0, 1)")
        order = np.random.default_rng(self.seed).permutation(n)
        n_val = int(round(self.validation_fraction * n))
        if n_val == 0:
            # validate on the training data rather than nothing
            tr, va = order, order
        else:
            if n_val >= n:
                raise ValueError("validation split leaves no training data")
            va, tr = order[:n_val], order[n_val:]

        model = SegmentationModel(self._decoder_config(), seed=self.seed)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          seed=self.seed, augment=self.augment,
                          target_dice=self.target_dice,
                          loss=LossConfig(kind=self.loss_kind,
                                          mutation=self.mutation),
                          optim=OptimConfig(lr=self.lr))
        self.history_ = train(model, (X[tr], y[tr]), (X[va], y[va]), cfg)
        model.eval()
        self.model_ = model
        self.val_dice_ = self.history_[-1].val_dice
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def _batched(self, X, fn, chunk=25):
        outs = []
        for start in range(0, X.shape[0], chunk):
            xb = T.Tensor(X[start:start + chunk].astype(T.default_dtype()))
            outs.append(fn(xb))
        return np.concatenate(outs)

    def predict(self, X):
        """Integer label masks (n, h, w)."""
        self._require_fitted()
        X = check_image_batch(X)
        return self._batched(
            X, lambda xb: predictions_from_logits(self.model_(xb).aggregate.data))

    def predict_proba(self, X):
        """Class probability maps (n, classes, h, w)."""
        self._require_fitted()
        X = check_image_batch(X)
        return self._batched(X, lambda xb: self.model_.predict_proba(xb).data)

    def transform(self, X):
        """Probability maps, for use as features mid-pipeline."""
        return self.predict_proba(X)

    def score(self, X, y):
        """Mean foreground dice as a fraction in [0, 1]."""
        self._require_fitted()
        X = check_image_batch(X)
        y = check_mask_batch(y, self.classes, X.shape)
        dice, _ = mean_scores(self.predict(X), y, self.classes)
        return float(dice) / 100.0
