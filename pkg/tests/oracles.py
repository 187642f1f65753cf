"""Independent reference implementations used to check the real ones.

Everything in here is written as plainly as possible (scalar loops, all-pairs
scans) and must stay independent of the library code paths it checks.
"""

import numpy as np


def conv2d_oracle(x, w, b=None, stride=1, padding=0):
    """Six-deep scalar loop convolution. Accumulates bias first, then input
    channel, kernel row, kernel col, in that order."""
    n, ci, h, ww = x.shape
    co, ci2, kh, kw = w.shape
    assert ci == ci2
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for nn in range(n):
        for o in range(co):
            for oi in range(ho):
                for oj in range(wo):
                    acc = x.dtype.type(0) if b is None else b[o]
                    for c in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                acc = acc + xp[nn, c, oi * stride + i, oj * stride + j] * w[o, c, i, j]
                    out[nn, o, oi, oj] = acc
    return out


def depthwise_conv2d_oracle(x, w, b=None, padding=1):
    """Scalar loop depthwise convolution, kernel row then kernel col order."""
    n, c, h, ww = x.shape
    c2, one, kh, kw = w.shape
    assert c == c2 and one == 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = h + 2 * padding - kh + 1
    wo = ww + 2 * padding - kw + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for nn in range(n):
        for ch in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    acc = x.dtype.type(0) if b is None else b[ch]
                    for i in range(kh):
                        for j in range(kw):
                            acc = acc + xp[nn, ch, oi + i, oj + j] * w[ch, 0, i, j]
                    out[nn, ch, oi, oj] = acc
    return out


def knn_graph_oracle(features, k, dilation=1, reduction=1):
    """Brute-force dilated KNN over feature + normalized (row/h, col/w) position.

    Candidate pooling, per-pair distances and the dilated pick are all spelled
    out one node at a time. Returns indices of shape (n, h*w, k).
    """
    n, c, h, w = features.shape
    if reduction > 1:
        assert h % reduction == 0 and w % reduction == 0
        hp, wp = h // reduction, w // reduction
        cand = np.zeros((n, c, hp, wp), dtype=features.dtype)
        for i in range(hp):
            for j in range(wp):
                block = features[:, :, i * reduction:(i + 1) * reduction,
                                 j * reduction:(j + 1) * reduction]
                cand[:, :, i, j] = block.mean(axis=(2, 3))
    else:
        hp, wp = h, w
        cand = features
    m = hp * wp
    assert k * dilation <= m

    def node_vecs(feat, gh, gw):
        rows = []
        for i in range(gh):
            for j in range(gw):
                pos = np.array([i / gh, j / gw], dtype=feat.dtype)
                rows.append([np.concatenate([feat[b, :, i, j], pos]) for b in range(feat.shape[0])])
        return rows  # list over nodes of list over batch

    q = node_vecs(features, h, w)
    cvecs = node_vecs(cand, hp, wp)
    idx = np.zeros((n, h * w, k), dtype=np.int64)
    for b in range(n):
        for node in range(h * w):
            d = np.empty(m, dtype=features.dtype)
            for cnd in range(m):
                diff = q[node][b] - cvecs[cnd][b]
                d[cnd] = np.sum(diff * diff)
            order = np.argsort(d, kind="stable")
            idx[b, node] = order[np.arange(k) * dilation]
    return idx


def directed_hausdorff_distances_oracle(a, b):
    """All-pairs nearest distances from each pixel of mask a to mask b."""
    pa = np.argwhere(a)
    pb = np.argwhere(b)
    out = np.empty(len(pa), dtype=np.float64)
    for i, p in enumerate(pa):
        best = None
        for q in pb:
            d2 = int(p[0] - q[0]) ** 2 + int(p[1] - q[1]) ** 2
            if best is None or d2 < best:
                best = d2
        out[i] = np.sqrt(best)
    return out


def hausdorff_oracle(a, b, percentile):
    """Symmetric percentile Hausdorff via all-pairs scans, nearest-rank."""
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float("inf")

    def ranked(d):
        d = np.sort(d)
        r = int(np.ceil(percentile / 100.0 * len(d))) - 1
        return d[max(r, 0)]

    return float(max(ranked(directed_hausdorff_distances_oracle(a, b)),
                     ranked(directed_hausdorff_distances_oracle(b, a))))


def fd_gradient(f, x, step=1e-5):
    """Central-difference gradient of scalar f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def rel_err(a, b, floor=1e-6):
    """Max elementwise relative error with an absolute floor on the scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0
