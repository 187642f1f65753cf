"""Cascaded graph-convolutional decoder over a four-level feature pyramid.

The deepest feature map passes through a graph convolution + spatial
attention stage, then each shallower stage upsamples the running decoded
state, merges it with the matching skip feature (elementwise add, or channel
concatenation which doubles that stage's width), and decodes again. Every
stage owns a 1x1 prediction head; head outputs are upsampled to the input
resolution and also combined into a single weighted-sum aggregate, all on raw
logits. Probabilities happen in ``predict_proba`` only.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .graph import Gcb, VARIANTS
from .nn import BatchNorm2d, Conv2d, DepthwiseConv2d, Module

AGGREGATIONS = ("add", "concat")
UPSAMPLE_MODES = ("nearest", "bilinear")


@dataclass
class DecoderConfig:
    """Architecture knobs; stage-indexed tuples run deepest stage first."""

    classes: int = 9
    stage_channels: tuple = (512, 320, 128, 64)
    k: int = 11
    dilations: tuple = (1, 1, 1, 1)
    reductions: tuple = (1, 1, 4, 2)
    variant: str = "mr"
    aggregation: str = "add"
    spa_kernel: int = 7
    head_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    upsample: str = "nearest"
    use_gcb: bool = True
    use_spa: bool = True
    cascaded: bool = True

    def validate(self):
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels must list 4 stages, deepest first")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage_channels must be positive")
        if len(self.dilations) != 4 or len(self.reductions) != 4:
            raise ValueError("dilations and reductions must list 4 stages")
        if len(self.head_weights) != 4:
            raise ValueError("head_weights must list 4 entries (p1..p4)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError("variant must be one of %s" % (VARIANTS,))
        if self.aggregation not in AGGREGATIONS:
            raise ValueError("aggregation must be one of %s" % (AGGREGATIONS,))
        if self.upsample not in UPSAMPLE_MODES:
            raise ValueError("upsample must be one of %s" % (UPSAMPLE_MODES,))
        if self.spa_kernel % 2 != 1:
            raise ValueError("spa_kernel must be odd")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class PredictionSet:
    """Per-stage full-resolution logits plus their weighted-sum aggregate.

    p1 comes from the shallowest (highest resolution) stage, p4 from the
    deepest. ``aggregate`` is sum(w_i * p_i) on logits.
    """

    p1: object
    p2: object
    p3: object
    p4: object
    aggregate: object

    @property
    def heads(self):
        return [self.p1, self.p2, self.p3, self.p4]


class Spa(Module):
    """Spatial attention: gate by a conv over channel max and mean maps."""

    def __init__(self, kernel, rng):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, rng, padding=kernel // 2)

    def forward(self, x):
        stats = T.concat_channel([T.channel_max(x), T.channel_avg(x)])
        mask = T.sigmoid(self.conv(stats))
        return T.mul(x, mask)


class Gcam(Module):
    """Decode stage: graph convolution block then spatial attention.

    Either half can be switched off for ablations; both off is identity.
    """

    def __init__(self, channels, variant, rng, k, dilation, reduction,
                 spa_kernel, use_gcb=True, use_spa=True):
        super().__init__()
        self.channels = channels
        if use_gcb:
            self.gcb = Gcb(channels, variant, rng, k=k, dilation=dilation,
                           reduction=reduction)
        else:
            self.gcb = None
        self.spa = Spa(spa_kernel, rng) if use_spa else None

    def forward(self, x):
        if self.gcb is not None:
            x = self.gcb(x)
        if self.spa is not None:
            x = self.spa(x)
        return x


class Ucb(Module):
    """Upsample by 2, depthwise 3x3, batchnorm, ReLU, pointwise channel map."""

    def __init__(self, in_ch, out_ch, rng, mode="nearest"):
        super().__init__()
        self.mode = mode
        self.dwc = DepthwiseConv2d(in_ch, 3, rng, padding=1)
        self.bn = BatchNorm2d(in_ch)
        self.proj = Conv2d(in_ch, out_ch, 1, rng)

    def forward(self, x):
        up = T.upsample2x(x, mode=self.mode)
        return self.proj(T.relu(self.bn(self.dwc(up))))


class SegHead(Module):
    """Pointwise logit projection."""

    def __init__(self, in_ch, classes, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, classes, 1, rng)

    def forward(self, x):
        return self.conv(x)


def _upsample_to_full(p, doublings, mode):
    for _ in range(doublings):
        p = T.upsample2x(p, mode=mode)
    return p


class GCascadeDecoder(Module):
    """Four-stage cascade over (x4, x3, x2, x1) pyramid features.

    Expects scales 1/32, 1/16, 1/8, 1/4 of the network input in that order.
    With aggregation "concat" the skip is concatenated instead of added and
    stages 3..1 run at double width.
    """

    def __init__(self, config, rng):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.stage_channels
        if config.cascaded and config.aggregation == "concat":
            widths = [ch[0]] + [2 * c for c in ch[1:]]
        else:
            widths = list(ch)
        self.stage_widths = widths

        def gcam(i):
            return Gcam(widths[i], config.variant, rng, k=config.k,
                        dilation=config.dilations[i], reduction=config.reductions[i],
                        spa_kernel=config.spa_kernel, use_gcb=config.use_gcb,
                        use_spa=config.use_spa)

        self.gcam4 = gcam(0)
        self.gcam3 = gcam(1)
        self.gcam2 = gcam(2)
        self.gcam1 = gcam(3)
        if config.cascaded:
            self.ucb3 = Ucb(widths[0], ch[1], rng, mode=config.upsample)
            self.ucb2 = Ucb(widths[1], ch[2], rng, mode=config.upsample)
            self.ucb1 = Ucb(widths[2], ch[3], rng, mode=config.upsample)
        self.head4 = SegHead(widths[0], config.classes, rng)
        self.head3 = SegHead(widths[1], config.classes, rng)
        self.head2 = SegHead(widths[2], config.classes, rng)
        self.head1 = SegHead(widths[3], config.classes, rng)

    def _check_pyramid(self, feats):
        if len(feats) != 4:
            raise ValueError("decoder expects [x4, x3, x2, x1]")
        ch = self.config.stage_channels
        for i, f in enumerate(feats):
            if f.data.ndim != 4:
                raise ValueError("pyramid level %d must be 4-d" % (4 - i))
            if f.shape[1] != ch[i]:
                raise ValueError("pyramid level %d has %d channels, expected %d"
                                 % (4 - i, f.shape[1], ch[i]))
        for i in range(3):
            deep, shallow = feats[i], feats[i + 1]
            if (deep.shape[2] * 2, deep.shape[3] * 2) != (shallow.shape[2], shallow.shape[3]):
                raise ValueError("pyramid scales must double between stages; "
                                 "got %s then %s" % (deep.shape, shallow.shape))

    def forward(self, feats):
        """feats: [x4, x3, x2, x1] tensors, deepest first. Returns PredictionSet."""
        self._check_pyramid(feats)
        cfg = self.config
        x4, x3, x2, x1 = feats
        if cfg.cascaded:
            d4 = self.gcam4(x4)
            a3 = self._merge(self.ucb3(d4), x3)
            d3 = self.gcam3(a3)
            a2 = self._merge(self.ucb2(d3), x2)
            d2 = self.gcam2(a2)
            a1 = self._merge(self.ucb1(d2), x1)
            d1 = self.gcam1(a1)
        else:
            d4, d3, d2, d1 = self.gcam4(x4), self.gcam3(x3), self.gcam2(x2), self.gcam1(x1)
        mode = cfg.upsample
        p4 = _upsample_to_full(self.head4(d4), 5, mode)
        p3 = _upsample_to_full(self.head3(d3), 4, mode)
        p2 = _upsample_to_full(self.head2(d2), 3, mode)
        p1 = _upsample_to_full(self.head1(d1), 2, mode)
        w = cfg.head_weights
        agg = T.add(T.add(T.add(T.mul_scalar(p1, w[0]), T.mul_scalar(p2, w[1])),
                          T.mul_scalar(p3, w[2])), T.mul_scalar(p4, w[3]))
        return PredictionSet(p1=p1, p2=p2, p3=p3, p4=p4, aggregate=agg)

    def _merge(self, up, skip):
        if up.shape != skip.shape and self.config.aggregation == "add":
            raise ValueError("skip shape %s does not match upsampled %s"
                             % (skip.shape, up.shape))
        if self.config.aggregation == "add":
            return T.add(up, skip)
        return T.concat_channel([up, skip])


class EncoderStub(Module):
    """Small strided-conv pyramid: scales 1/4, 1/8, 1/16, 1/32.

    Stands in for a pretrained backbone; takes (n, 3, h, w) with h and w
    divisible by 32. ``channels`` lists widths shallowest first.
    """

    def __init__(self, channels, rng, in_ch=3):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("encoder needs 4 stage widths, shallowest first")
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.in_ch = in_ch
        self.conv0 = Conv2d(in_ch, c1, 3, rng, stride=2, padding=1)
        self.bn0 = BatchNorm2d(c1)
        self.conv1 = Conv2d(c1, c1, 3, rng, stride=2, padding=1)
        self.bn1 = BatchNorm2d(c1)
        self.conv2 = Conv2d(c1, c2, 3, rng, stride=2, padding=1)
        self.bn2 = BatchNorm2d(c2)
        self.conv3 = Conv2d(c2, c3, 3, rng, stride=2, padding=1)
        self.bn3 = BatchNorm2d(c3)
        self.conv4 = Conv2d(c3, c4, 3, rng, stride=2, padding=1)
        self.bn4 = BatchNorm2d(c4)

    def forward(self, x):
        h = T.relu(self.bn0(self.conv0(x)))
        x1 = T.relu(self.bn1(self.conv1(h)))
        x2 = T.relu(self.bn2(self.conv2(x1)))
        x3 = T.relu(self.bn3(self.conv3(x2)))
        x4 = T.relu(self.bn4(self.conv4(x3)))
        return [x4, x3, x2, x1]


class SegmentationModel(Module):
    """Encoder stub plus cascade decoder; the trainable unit."""

    def __init__(self, config, seed=0, in_ch=3):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.encoder = EncoderStub(list(reversed(config.stage_channels)), rng,
                                   in_ch=in_ch)
        self.decoder = GCascadeDecoder(config, rng)

    def _check_input(self, x):
        if x.data.ndim != 4 or x.shape[1] != self.encoder.in_ch:
            raise ValueError("input must be (n, %d, h, w), got %s"
                             % (self.encoder.in_ch, x.shape))
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError("input sides must be divisible by 32, got %dx%d"
                             % (x.shape[2], x.shape[3]))
        if not np.all(np.isfinite(x.data)):
            raise ValueError("input contains non-finite values")

    def forward(self, x):
        self._check_input(x)
        return self.decoder(self.encoder(x))

    def predict_proba(self, x):
        """Probabilities from the aggregate logits; softmax over classes,
        sigmoid when there is a single output channel."""
        preds = self.forward(x)
        if self.config.classes == 1:
            return T.sigmoid(preds.aggregate)
        return T.softmax_channel(preds.aggregate)
