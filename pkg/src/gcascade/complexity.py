"""Closed-form parameter and FLOP accounting for the cascade decoder.

Two cost columns:

* ``macs`` is the headline column: convolution multiply-accumulates only,
  the convention complexity tables for this family of decoders are quoted
  in. Bias adds, batchnorm, activations, KNN search, and data movement are
  excluded here.
* ``flops_full`` is an everything-counted column at 2 FLOPs per MAC plus
  KNN distance work (2 per multiply-accumulate over descriptor dims),
  batchnorm at 2 FLOPs/element, activations at 1 (GELU at 2), neighbor
  aggregation and candidate pooling at 1 per element touched. Sorting,
  gathers and upsampling are data movement and are not counted.

Parameters count trainable arrays only (conv and affine batchnorm weights
and biases); batchnorm running statistics are buffers, not parameters.
The encoder backbone is out of scope; the tree covers the decoder.
"""

from dataclasses import dataclass, field

CONVENTION = ("macs: conv multiply-accumulates only | flops_full: 2/MAC, "
              "KNN distances 2/MAC, BN 2/elem, act 1/elem (GELU 2), "
              "aggregation+pooling 1/elem; sort/gather/upsample uncounted")


@dataclass
class Node:
    path: str
    params: int = 0
    macs: int = 0
    flops_full: int = 0
    children: list = field(default_factory=list)

    def add(self, child):
        self.children.append(child)
        self.params += child.params
        self.macs += child.macs
        self.flops_full += child.flops_full
        return child

    def walk(self, depth=0):
        yield self, depth
        for child in self.children:
            yield from child.walk(depth + 1)

    def leaf_sums(self):
        leaves = [n for n, _ in self.walk() if not n.children]
        return (sum(n.params for n in leaves),
                sum(n.macs for n in leaves),
                sum(n.flops_full for n in leaves))


def _conv(path, cin, cout, kh, kw, h, w):
    macs = cout * cin * kh * kw * h * w
    return Node(path, params=cout * cin * kh * kw + cout,
                macs=macs, flops_full=2 * macs)


def _depthwise(path, c, kh, kw, h, w):
    macs = c * kh * kw * h * w
    return Node(path, params=c * kh * kw + c, macs=macs, flops_full=2 * macs)


def _bn(path, c, h, w):
    return Node(path, params=2 * c, flops_full=2 * c * h * w)


def _act(path, c, h, w, cost=1):
    return Node(path, flops_full=cost * c * h * w)


def _clamped(k, dilation, reduction, h, w):
    # mirrors the runtime clamping of the graph block
    r = reduction if (h % reduction == 0 and w % reduction == 0
                      and reduction <= min(h, w)) else 1
    m = (h // r) * (w // r)
    k = min(k, m)
    dil = min(dilation, m // k) if k else 1
    return k, max(dil, 1), r


def _knn(path, c, k, dilation, reduction, h, w):
    k, _, r = _clamped(k, dilation, reduction, h, w)
    m = h * w
    mc = (h // r) * (w // r)
    d = c + 2  # features plus normalized row/col coordinates
    node = Node(path)
    node.flops_full += 2 * m * mc * d  # pairwise squared distances
    if r > 1:
        node.flops_full += c * h * w  # candidate average pooling
    return node, k, mc


def _dyn_conv(path, c, variant, k, m, mc, h, w):
    """The per-variant neighborhood mix; (h, w) only sizes elementwise
    terms, conv work runs on m nodes (mc candidate nodes for the shared
    candidate transform)."""
    node = Node(path)
    if variant == "mr":
        node.add(_act("%s.neighbor_max" % path, c, 1, k * m))
        node.add(_conv("%s.fc" % path, 2 * c, c, 1, 1, h, w))
    elif variant == "edge":
        edge = _conv("%s.fc" % path, 2 * c, c, 1, 1, h, w)
        edge.macs *= k
        edge.flops_full = 2 * edge.macs
        node.add(edge)
        node.add(_act("%s.edge_max" % path, c, 1, k * m))
    elif variant == "sage":
        pre = _conv("%s.fc_neighbor" % path, c, c, 1, 1, 1, mc)
        node.add(pre)
        node.add(_act("%s.neighbor_max" % path, c, 1, k * m))
        node.add(_conv("%s.fc" % path, 2 * c, c, 1, 1, h, w))
    elif variant == "gin":
        node.add(Node("%s.eps" % path, params=1, flops_full=2 * c * m))
        node.add(_act("%s.neighbor_sum" % path, c, 1, k * m))
        node.add(_conv("%s.fc" % path, c, c, 1, 1, h, w))
    else:
        raise ValueError("unknown variant %r" % variant)
    return node


def _gcb(path, c, cfg, stage, h, w):
    node = Node(path)
    node.add(_conv("%s.fc1" % path, c, c, 1, 1, h, w))
    node.add(_bn("%s.bn1" % path, c, h, w))
    node.add(_act("%s.relu1" % path, c, h, w))
    knn, k, mc = _knn("%s.knn" % path, c, cfg.k, cfg.dilations[stage],
                      cfg.reductions[stage], h, w)
    node.add(knn)
    node.add(_dyn_conv("%s.gconv" % path, c, cfg.variant, k, h * w, mc, h, w))
    node.add(_bn("%s.gconv_bn" % path, c, h, w))
    node.add(_act("%s.gelu" % path, c, h, w, cost=2))
    node.add(_conv("%s.fc2" % path, c, c, 1, 1, h, w))
    node.add(_bn("%s.bn2" % path, c, h, w))
    node.add(_act("%s.relu2" % path, c, h, w))
    return node


def _spa(path, c, kernel, h, w):
    node = Node(path)
    node.add(_act("%s.channel_stats" % path, 2 * c, h, w))
    node.add(_conv("%s.conv" % path, 2, 1, kernel, kernel, h, w))
    node.add(_act("%s.sigmoid_scale" % path, c + 1, h, w))
    return node


def _gcam(path, c, cfg, stage, h, w):
    node = Node(path)
    if cfg.use_gcb:
        node.add(_gcb("%s.gcb" % path, c, cfg, stage, h, w))
    if cfg.use_spa:
        node.add(_spa("%s.spa" % path, c, cfg.spa_kernel, h, w))
    return node


def _ucb(path, cin, cout, h, w):
    # runs after the x2 upsample, so spatial dims double
    node = Node(path)
    node.add(_depthwise("%s.dwc" % path, cin, 3, 3, 2 * h, 2 * w))
    node.add(_bn("%s.bn" % path, cin, 2 * h, 2 * w))
    node.add(_act("%s.relu" % path, cin, 2 * h, 2 * w))
    node.add(_conv("%s.pw" % path, cin, cout, 1, 1, 2 * h, 2 * w))
    return node


def count(config, input_hw=224):
    """Closed-form complexity tree for the decoder at a square input size.

    Stage grids are input/32, /16, /8, /4 deep-to-shallow, matching a
    four-scale pyramid encoder.
    """
    config.validate()
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    h, w = input_hw
    if h % 32 or w % 32:
        raise ValueError("input sides must be divisible by 32")
    c4, c3, c2, c1 = config.stage_channels
    sizes = [(h // 32, w // 32), (h // 16, w // 16),
             (h // 8, w // 8), (h // 4, w // 4)]
    double = 2 if config.aggregation == "concat" else 1
    widths = [c4, c3 * double, c2 * double, c1 * double]

    root = Node("decoder")
    for stage, (cs, (sh, sw)) in enumerate(zip(widths, sizes)):
        name = 4 - stage
        root.add(_gcam("gcam%d" % name, cs, config, stage, sh, sw))
        root.add(_conv("head%d" % name, cs, config.classes, 1, 1, sh, sw))
        if stage < 3:
            nxt = config.stage_channels[stage + 1]
            root.add(_ucb("ucb%d" % (name - 1), cs, nxt, sh, sw))
    # summing four full-resolution head maps
    root.add(Node("aggregate", flops_full=3 * config.classes * h * w))
    return root


def format_table(root, csv=False):
    rows = []
    if csv:
        rows.append("path,params,macs,flops_full")
        for node, _ in root.walk():
            rows.append("%s,%d,%d,%d" % (node.path, node.params, node.macs,
                                         node.flops_full))
        return "\n".join(rows)
    rows.append("# " + CONVENTION)
    rows.append("%-42s %12s %14s %14s" % ("path", "params", "macs",
                                          "flops_full"))
    for node, depth in root.walk():
        rows.append("%-42s %12d %14d %14d"
                    % ("  " * depth + node.path, node.params, node.macs,
                       node.flops_full))
    rows.append("totals: params %d (%.4gM)  macs %d (%.4gG)  flops_full %d (%.4gG)"
                % (root.params, root.params / 1e6, root.macs, root.macs / 1e9,
                   root.flops_full, root.flops_full / 1e9))
    return "\n".join(rows)
