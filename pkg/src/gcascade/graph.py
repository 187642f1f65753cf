"""Dilated KNN graphs over feature maps and the graph convolution block.

Nodes are pixels. Each node's descriptor is its feature vector concatenated
with its normalized grid position (row/h, col/w), and neighbors are the k
nearest candidates by squared euclidean distance, taken at dilated positions
0, d, 2d, ... of the ascending distance ordering. With ``reduction`` r > 1
the candidate set is the r x r average-pooled map instead of the full map,
which shrinks the distance computation by r^2.

Graph topology is built from raw values and is not differentiated through;
gradients flow through the gathered features only.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module

VARIANTS = ("mr", "edge", "sage", "gin")

# Above this many distance terms (nodes * candidates * dims per batch item),
# switch from the elementwise (q - c)^2 form to the norm expansion
# ||q||^2 - 2qc + ||c||^2. The small form matches a per-pair scalar reference
# bit for bit; the expansion is far cheaper on big maps.
EXACT_DIST_WORK = 1 << 18


@dataclass(frozen=True)
class NeighborGraph:
    """Neighbor indices for one batch of feature maps.

    ``indices[b, i, s]`` is the candidate index of slot s for node i. With
    reduction 1 candidates are the nodes themselves and slot 0 is the node
    (the self loop); with reduction > 1 indices refer to the pooled grid.
    """

    indices: np.ndarray
    grid: tuple
    cand_grid: tuple
    k: int
    dilation: int
    reduction: int

    @property
    def num_nodes(self):
        return self.grid[0] * self.grid[1]

    @property
    def num_candidates(self):
        return self.cand_grid[0] * self.cand_grid[1]


def normalized_positions(h, w, dtype):
    """(h*w, 2) array of (row/h, col/w) per node, row-major."""
    rows = np.repeat(np.arange(h), w).astype(dtype) / dtype(h)
    cols = np.tile(np.arange(w), h).astype(dtype) / dtype(w)
    return np.stack([rows, cols], axis=1)


def _node_matrix(feat, h, w):
    n, c = feat.shape[0], feat.shape[1]
    flat = feat.reshape(n, c, h * w).transpose(0, 2, 1)
    pos = normalized_positions(h, w, feat.dtype.type)
    return np.concatenate([flat, np.broadcast_to(pos, (n, h * w, 2))], axis=2)


def build_knn_graph(features, k, dilation=1, reduction=1):
    """Build the dilated KNN graph for a (n, c, h, w) numpy feature map.

    Ties in distance break toward the lower candidate index (stable sort).
    Raises when k * dilation exceeds the candidate count; callers that want
    graceful degradation clamp before calling.
    """
    features = np.asarray(features)
    if features.ndim != 4:
        raise ValueError("features must be (n, c, h, w), got %s" % (features.shape,))
    n, c, h, w = features.shape
    if k < 1 or dilation < 1 or reduction < 1:
        raise ValueError("k, dilation and reduction must be >= 1")
    if reduction > 1:
        if h % reduction or w % reduction:
            raise ValueError("reduction %d does not divide grid %dx%d"
                             % (reduction, h, w))
        hp, wp = h // reduction, w // reduction
        cand = features.reshape(n, c, hp, reduction, wp, reduction).mean(axis=(3, 5))
    else:
        hp, wp = h, w
        cand = features
    m = hp * wp
    if k * dilation > m:
        raise ValueError("k*dilation = %d exceeds %d candidates" % (k * dilation, m))

    q = _node_matrix(features, h, w)
    cm = _node_matrix(cand, hp, wp)
    nodes, dims = q.shape[1], q.shape[2]

    if nodes * m * dims <= EXACT_DIST_WORK:
        diff = q[:, :, None, :] - cm[:, None, :, :]
        dist = (diff * diff).sum(axis=-1)
    else:
        qq = (q * q).sum(axis=-1)
        cc = (cm * cm).sum(axis=-1)
        dist = qq[:, :, None] - 2.0 * np.matmul(q, cm.transpose(0, 2, 1)) + cc[:, None, :]
        np.maximum(dist, 0.0, out=dist)
        if reduction == 1:
            # the self distance is zero by definition; keep it exact so the
            # self loop survives the sort
            ii = np.arange(nodes)
            dist[:, ii, ii] = 0.0

    order = np.argsort(dist, axis=-1, kind="stable")
    sel = order[:, :, 0:(k - 1) * dilation + 1:dilation]
    return NeighborGraph(indices=np.ascontiguousarray(sel.astype(np.int64)),
                         grid=(h, w), cand_grid=(hp, wp),
                         k=k, dilation=dilation, reduction=reduction)


def graph_rows(g):
    """Flatten a NeighborGraph to (batch, node, slot, candidate) int rows."""
    n, nodes, k = g.indices.shape
    b, nd, sl = np.meshgrid(np.arange(n), np.arange(nodes), np.arange(k),
                            indexing="ij")
    return np.stack([b.ravel(), nd.ravel(), sl.ravel(), g.indices.ravel()], axis=1)


class DynConv(Module):
    """Graph feature transform; one of four neighborhood aggregations.

    mr:   W [x_i, max_j (x_j - x_i)]           W: 2c -> c
    edge: max_j W [x_i, x_j - x_i]             W: 2c -> c, applied per edge
    sage: W2 [x_i, max_j W1 x_j]               W1: c -> c, W2: 2c -> c
    gin:  W ((1 + eps) x_i + sum_j x_j)        W: c -> c, eps learned scalar

    All transforms are 1x1 convolutions. For sage, W1 runs once on the
    candidate map and is then gathered, which is the same function at lower
    cost. Neighbor features come from the pooled map when the graph was
    built with reduction > 1.
    """

    def __init__(self, channels, variant, rng):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError("variant must be one of %s, got %r" % (VARIANTS, variant))
        self.channels = channels
        self.variant = variant
        if variant in ("mr", "edge"):
            self.w = Conv2d(2 * channels, channels, 1, rng)
        elif variant == "sage":
            self.w1 = Conv2d(channels, channels, 1, rng)
            self.w2 = Conv2d(2 * channels, channels, 1, rng)
        else:
            self.w = Conv2d(channels, channels, 1, rng)
            self.eps = T.Parameter(np.zeros((), dtype=T.default_dtype()))

    def _candidates(self, x, g):
        n, c, h, w = x.shape
        if g.reduction == 1:
            return T.reshape(x, (n, c, h * w))
        pooled = T.avgpool2d(x, g.reduction)
        return T.reshape(pooled, (n, c, g.num_candidates))

    def forward(self, x, g):
        n, c, h, w = x.shape
        if (h, w) != g.grid:
            raise ValueError("graph built for grid %s, input is %dx%d"
                             % (g.grid, h, w))
        xf = T.reshape(x, (n, c, h * w))
        cand = self._candidates(x, g)
        k = g.indices.shape[2]

        if self.variant == "mr":
            xj = T.gather_nodes(cand, g.indices)
            xi = T.reshape(xf, (n, c, h * w, 1))
            agg = T.max_lastdim(T.sub(xj, xi))
            feat = T.concat_channel([x, T.reshape(agg, (n, c, h, w))])
            return self.w(feat)

        if self.variant == "edge":
            xj = T.gather_nodes(cand, g.indices)
            xi = T.reshape(xf, (n, c, h * w, 1))
            edge = T.concat_channel([T.broadcast_last(xi, k), T.sub(xj, xi)])
            per_edge = self.w(edge)  # 1x1 conv over the (nodes, k) plane
            agg = T.max_lastdim(per_edge)
            return T.reshape(agg, (n, c, h, w))

        if self.variant == "sage":
            hp, wp = g.cand_grid
            tr = self.w1(T.reshape(cand, (n, c, hp, wp)))
            xj = T.gather_nodes(T.reshape(tr, (n, c, g.num_candidates)), g.indices)
            agg = T.max_lastdim(xj)
            feat = T.concat_channel([x, T.reshape(agg, (n, c, h, w))])
            return self.w2(feat)

        # gin
        xj = T.gather_nodes(cand, g.indices)
        total = T.sum_axes(xj, (3,))
        scaled = T.mul(x, T.add_scalar(self.eps, 1.0))
        return self.w(T.add(scaled, T.reshape(total, (n, c, h, w))))


class GraphConv(Module):
    """DynConv followed by batchnorm and GELU."""

    def __init__(self, channels, variant, rng):
        super().__init__()
        self.dyn = DynConv(channels, variant, rng)
        self.bn = BatchNorm2d(channels)

    def forward(self, x, g):
        return T.gelu(self.bn(self.dyn(x, g)))


class Gcb(Module):
    """Graph convolution block: 1x1 conv in, graph conv, 1x1 conv out.

    Both pointwise stages keep the channel count and carry their own
    batchnorm + ReLU. The KNN graph is built on the first stage's output,
    with k and dilation clamped per input so small late-stage grids (down
    to a single node) stay legal.
    """

    def __init__(self, channels, variant, rng, k=11, dilation=1, reduction=1):
        super().__init__()
        self.channels = channels
        self.k = k
        self.dilation = dilation
        self.reduction = reduction
        self.fc1 = Conv2d(channels, channels, 1, rng)
        self.bn1 = BatchNorm2d(channels)
        self.gconv = GraphConv(channels, variant, rng)
        self.fc2 = Conv2d(channels, channels, 1, rng)
        self.bn2 = BatchNorm2d(channels)

    def _clamped(self, h, w):
        r = self.reduction if (h % self.reduction == 0 and w % self.reduction == 0
                               and self.reduction <= min(h, w)) else 1
        m = (h // r) * (w // r)
        k = min(self.k, m)
        dil = min(self.dilation, m // k) if k else 1
        return k, max(dil, 1), r

    def forward(self, x):
        t = T.relu(self.bn1(self.fc1(x)))
        k, dil, r = self._clamped(x.shape[2], x.shape[3])
        g = build_knn_graph(t.data, k, dilation=dil, reduction=r)
        y = self.gconv(t, g)
        return T.relu(self.bn2(self.fc2(y)))
