"""Training loop, per-epoch CSV logging, and checkpoint files.

One RNG seeded from the config drives shuffling and augmentation so a
(config, seed, data) triple replays bit-identically. The CSV's seconds
column is wall clock and is the only non-reproducible field.
"""

import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .data import augment_pair
from .decoder import DecoderConfig, SegmentationModel
from .gten import read_gten, read_manifest, write_gten, write_manifest
from .losses import LossConfig, combined_loss, mutation_loss
from .metrics import mean_scores, predictions_from_logits
from .optim import AdamW, OptimConfig

LOG_COLUMNS = "epoch,train_loss,val_dice,val_miou,seconds"
CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 10
    seed: int = 0
    augment: bool = True
    shuffle: bool = True
    target_dice: float = 0.0  # stop once val dice reaches this; 0 disables
    eval_batch: int = 25
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch < 1:
            raise ValueError("epochs and batch sizes must be positive")
        self.loss.validate()
        self.optim.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d.pop("loss")
        d.pop("optim")
        return d


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_dice: float
    val_miou: float
    seconds: float

    def csv_row(self):
        return "%d,%.6f,%.6f,%.6f,%.3f" % (self.epoch, self.train_loss,
                                           self.val_dice, self.val_miou,
                                           self.seconds)


def validate_model(model, images, masks, batch=25):
    """Mean foreground (dice, miou) over the split, eval-mode forward."""
    was_training = model.training
    model.eval()
    preds = []
    for start in range(0, images.shape[0], batch):
        x = T.Tensor(images[start:start + batch].astype(T.default_dtype()))
        out = model(x)
        preds.append(predictions_from_logits(out.aggregate.data))
    if was_training:
        model.train()
    labels = np.concatenate(preds)
    return mean_scores(labels, masks, model.config.classes)


def train(model, train_data, val_data, config, log_path=None,
          checkpoint_dir=None):
    """Runs the loop, returns the list of EpochLog rows.

    train_data/val_data: (images (n,3,h,w) float, masks (n,h,w) int).
    Writes one CSV row per epoch as it goes when log_path is given, and a
    final checkpoint when checkpoint_dir is given.
    """
    config.validate()
    images, masks = train_data
    n = images.shape[0]
    rng = np.random.default_rng(config.seed)
    opt = AdamW([p for _, p in model.named_parameters()], config.optim)
    rows = []
    log_fh = None
    if log_path:
        log_fh = open(log_path, "w")
        log_fh.write(LOG_COLUMNS + "\n")
    try:
        model.train()
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(n) if config.shuffle else np.arange(n)
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                xb = np.empty((len(idx),) + images.shape[1:],
                              dtype=T.default_dtype())
                yb = np.empty((len(idx),) + masks.shape[1:], dtype=np.int64)
                for row, j in enumerate(idx):
                    if config.augment:
                        img, msk = augment_pair(images[j], masks[j], rng)
                        xb[row] = img
                        yb[row] = msk
                    else:
                        xb[row] = images[j]
                        yb[row] = masks[j]
                loss = _step(model, opt, xb, yb, config.loss)
                if not np.isfinite(loss):
                    raise RuntimeError(
                        "non-finite training loss %r at epoch %d, batch %d"
                        % (loss, epoch, start // config.batch_size))
                total += loss * len(idx)
            val_dice, val_miou = validate_model(model, val_data[0],
                                                val_data[1],
                                                batch=config.eval_batch)
            row = EpochLog(epoch=epoch, train_loss=total / n,
                           val_dice=val_dice, val_miou=val_miou,
                           seconds=time.perf_counter() - t0)
            rows.append(row)
            if log_fh:
                log_fh.write(row.csv_row() + "\n")
                log_fh.flush()
            if config.target_dice and val_dice >= config.target_dice:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    if checkpoint_dir:
        save_checkpoint(checkpoint_dir, model, config, rows)
    return rows


def _step(model, opt, xb, yb, loss_cfg):
    opt.zero_grad()
    with T.Tape() as tape:
        preds = model(T.Tensor(xb))
        if loss_cfg.mutation:
            loss = mutation_loss(preds.heads, yb, loss_cfg)
        else:
            loss = combined_loss(preds.aggregate, yb, loss_cfg)
        value = float(loss.data)
        T.backward(loss, tape)
    opt.step()
    return value


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, model, train_config=None, rows=None):
    """Weights as one GTEN file per state entry plus a manifest. Content is
    a pure function of (weights, configs): no timestamps, sorted keys."""
    os.makedirs(directory, exist_ok=True)
    weights_dir = os.path.join(directory, "weights")
    os.makedirs(weights_dir, exist_ok=True)
    state = model.state_dict()
    manifest = {"format_version": CHECKPOINT_FORMAT,
                "precision": T.get_precision(),
                "entries": len(state)}
    for key, value in model.config.to_dict().items():
        manifest["decoder.%s" % key] = _encode(value)
    manifest["model.seed"] = model.seed
    if train_config is not None:
        for key, value in train_config.to_dict().items():
            manifest["train.%s" % key] = _encode(value)
        for key, value in train_config.loss.to_dict().items():
            manifest["loss.%s" % key] = _encode(value)
        for key, value in train_config.optim.to_dict().items():
            manifest["optim.%s" % key] = _encode(value)
    if rows:
        manifest["epochs_run"] = len(rows)
        manifest["final_val_dice"] = "%.6f" % rows[-1].val_dice
        manifest["final_val_miou"] = "%.6f" % rows[-1].val_miou
    for key, arr in state.items():
        write_gten(os.path.join(weights_dir, key + ".gten"), arr)
    write_manifest(os.path.join(directory, "manifest.txt"), manifest)


def _encode(value):
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return value


def load_checkpoint(directory):
    """-> (manifest dict, state dict of numpy arrays)."""
    manifest = read_manifest(os.path.join(directory, "manifest.txt"))
    weights_dir = os.path.join(directory, "weights")
    state = {}
    for name in sorted(os.listdir(weights_dir)):
        if name.endswith(".gten"):
            state[name[:-5]] = read_gten(os.path.join(weights_dir, name))
    if int(manifest.get("entries", len(state))) != len(state):
        raise ValueError("checkpoint lists %s entries but holds %d"
                         % (manifest.get("entries"), len(state)))
    return manifest, state


def _decode_tuple(text, cast):
    return tuple(cast(part) for part in str(text).split(","))


def decoder_config_from_manifest(manifest):
    base = DecoderConfig()
    kwargs = {}
    for key, default in base.to_dict().items():
        raw = manifest.get("decoder.%s" % key)
        if raw is None:
            continue
        if isinstance(default, tuple):
            cast = float if any(isinstance(v, float) for v in default) else int
            kwargs[key] = _decode_tuple(raw, cast)
        elif isinstance(default, bool):
            kwargs[key] = str(raw) in ("True", "true", "1", "on")
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = str(raw)
    return DecoderConfig(**kwargs)


def load_model(directory):
    """Rebuild the model a checkpoint was saved from and restore weights."""
    manifest, state = load_checkpoint(directory)
    config = decoder_config_from_manifest(manifest)
    model = SegmentationModel(config, seed=int(manifest.get("model.seed", 0)))
    model.load_state_dict(state)
    model.eval()
    return model, manifest
