"""Synthetic shapes dataset, PGM mask/image files, and augmentation.

Samples are grayscale scenes (replicated to 3 channels) of 1-3 axis-aligned
rectangles and ellipses over a noisy background. Each foreground class draws
its own intensity band so the task is learnable from pixel values alone.
Dataset directories hold one 8-bit binary PGM per image and per mask:

    root/meta.txt
    root/train/image_0000.pgm  root/train/mask_0000.pgm ...
    root/val/...
"""

import os
from dataclasses import dataclass, asdict

import numpy as np


@dataclass
class SynthConfig:
    size: int = 64
    classes: int = 3
    train: int = 200
    val: int = 50
    seed: int = 0

    def validate(self):
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if self.classes < 2:
            raise ValueError("need at least one foreground class")
        if self.train < 1 or self.val < 1:
            raise ValueError("split sizes must be positive")
        return self

    def to_dict(self):
        return asdict(self)


def _draw_shape(img, mask, label, level, size, rng):
    hh = int(rng.integers(size // 10, size // 4 + 1))
    hw = int(rng.integers(size // 10, size // 4 + 1))
    cy = int(rng.integers(hh, size - hh))
    cx = int(rng.integers(hw, size - hw))
    if rng.random() < 0.5:
        region = np.zeros((size, size), dtype=bool)
        region[cy - hh:cy + hh + 1, cx - hw:cx + hw + 1] = True
    else:
        yy, xx = np.ogrid[:size, :size]
        region = ((yy - cy) / hh) ** 2 + ((xx - cx) / hw) ** 2 <= 1.0
    img[region] = level + 0.03 * rng.standard_normal(int(region.sum()))
    mask[region] = label


def make_synth_dataset(n, size=64, classes=3, seed=0):
    """Returns (images float32 (n,3,size,size) in [0,1], masks int64
    (n,size,size)). Deterministic per seed; sample i always contains class
    1 + i % (classes-1), so every class occurs in any split of length >=
    classes-1."""
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    masks = np.zeros((n, size, size), dtype=np.int64)
    fg = classes - 1
    for i in range(n):
        img = rng.uniform(0.05, 0.2) + 0.04 * rng.standard_normal((size, size))
        mask = np.zeros((size, size), dtype=np.int64)
        count = int(rng.integers(1, min(3, fg) + 1))
        forced = 1 + i % fg
        pool = [c for c in range(1, classes) if c != forced]
        extra = list(rng.choice(pool, size=count - 1, replace=False)) if count > 1 else []
        for label in [forced] + [int(c) for c in extra]:
            level = 0.35 + 0.6 * label / fg
            _draw_shape(img, mask, label, level, size, rng)
        np.clip(img, 0.0, 1.0, out=img)
        images[i] = img.astype(np.float32)[None].repeat(3, axis=0)
        masks[i] = mask
    return images, masks


def augment_pair(image, mask, rng):
    """Random 90-degree rotation plus horizontal flip (p=0.5), applied to
    image (c,h,w) and mask (h,w) together."""
    k = int(rng.integers(0, 4))
    flip = bool(rng.random() < 0.5)
    img = np.rot90(image, k, axes=(1, 2))
    msk = np.rot90(mask, k)
    if flip:
        img = img[:, :, ::-1]
        msk = msk[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


# ---------------------------------------------------------------- PGM io

def write_pgm(path, array):
    """8-bit binary (P5) PGM."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError("PGM image must be 2-d")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("values must fit uint8")
        arr = arr.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError("%s: not a binary PGM (P5) file" % path)
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with optional # comment lines
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError("%s: only maxval 255 supported, got %d" % (path, maxval))
    payload = data[pos:pos + width * height]
    if len(payload) != width * height:
        raise ValueError("%s: truncated pixel payload" % path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


# ---------------------------------------------------------------- dataset dirs

def write_split(directory, images, masks):
    os.makedirs(directory, exist_ok=True)
    for i in range(images.shape[0]):
        gray = np.round(images[i, 0] * 255.0).astype(np.uint8)
        write_pgm(os.path.join(directory, "image_%04d.pgm" % i), gray)
        write_pgm(os.path.join(directory, "mask_%04d.pgm" % i),
                  masks[i].astype(np.uint8))


def read_split(directory):
    names = sorted(f for f in os.listdir(directory)
                   if f.startswith("image_") and f.endswith(".pgm"))
    if not names:
        raise FileNotFoundError("no image_*.pgm files in %s" % directory)
    images = []
    masks = []
    for name in names:
        gray = read_pgm(os.path.join(directory, name)).astype(np.float32) / 255.0
        images.append(np.repeat(gray[None], 3, axis=0))
        masks.append(read_pgm(os.path.join(directory, name.replace("image_", "mask_")))
                     .astype(np.int64))
    return np.stack(images), np.stack(masks)


def write_dataset(root, config):
    """Generate and store train/val splits plus meta.txt."""
    config.validate()
    images, masks = make_synth_dataset(config.train + config.val,
                                       size=config.size,
                                       classes=config.classes,
                                       seed=config.seed)
    write_split(os.path.join(root, "train"),
                images[:config.train], masks[:config.train])
    write_split(os.path.join(root, "val"),
                images[config.train:], masks[config.train:])
    meta = config.to_dict()
    meta["format"] = "pgm"
    with open(os.path.join(root, "meta.txt"), "w") as fh:
        for key in sorted(meta):
            fh.write("%s = %s\n" % (key, meta[key]))
    return meta


def read_meta(root):
    meta = {}
    with open(os.path.join(root, "meta.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def read_dataset(root):
    """-> (meta dict, (train_images, train_masks), (val_images, val_masks))"""
    meta = read_meta(root)
    train = read_split(os.path.join(root, "train"))
    val = read_split(os.path.join(root, "val"))
    return meta, train, val
