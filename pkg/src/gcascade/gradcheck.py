"""Finite-difference gradient verification, runnable from the CLI.

Every differentiable primitive gets a check against central differences in
64-bit, plus a whole-decoder check on a toy four-stage pyramid where the
analytic gradient of a fixed random projection is compared at sampled
parameter and input coordinates. The decoder check uses k >= node count so
every graph is complete: neighbor selection is piecewise constant in the
inputs, and keeping it constant keeps the checked function differentiable.

For the op checks, inputs are nudged away from activation kinks
(|x| > 1e-3) so the finite difference never straddles a ReLU corner. The
whole decoder cannot be positioned that way: it is piecewise smooth, with
creases wherever a max aggregation (neighbor max, spatial-attention channel
max) has a near-tie or an activation input sits near zero, and with
hundreds of max units a few sampled coordinates always straddle a crease
at any fixed step. Each decoder estimate is therefore validated by step
refinement: the step shrinks tenfold until two successive estimates agree,
and the last refinement is compared against the analytic gradient. A
coordinate whose estimates never stabilize sits on a crease where the
classical derivative does not exist; it is counted as skipped rather than
compared. A wrong backward formula still fails the check, because its FD
estimates stabilize onto the true derivative, away from the analytic value.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, GCascadeDecoder

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    seconds: float
    checked: int = 0
    skipped: int = 0

    def ok(self, tol=TOLERANCE):
        return self.max_rel_err < tol


def relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def fd_gradient(f, x, step=FD_STEP):
    """Central-difference gradient of scalar f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * step)
    return g


def _away_from_kinks(arr, margin=1e-3):
    out = arr.copy()
    small = np.abs(out) < margin
    out[small] = margin * np.where(out[small] < 0, -1.0, 1.0)
    return out


def _projection(shape, rng):
    return rng.normal(size=shape)


def check_fn(name, fn, arrays, wrt=0, rng=None):
    """FD-check d(proj . fn)/d(arrays[wrt]); other arrays held constant."""
    rng = rng or np.random.default_rng(0)
    t0 = time.perf_counter()
    tensors = [T.Tensor(a.copy(), requires_grad=(i == wrt))
               for i, a in enumerate(arrays)]
    with T.Tape() as tape:
        out = fn(*tensors)
        proj = _projection(out.shape, np.random.default_rng(99))
        loss = T.sum_all(T.mul(out, T.Tensor(proj)))
        T.backward(loss, tape)
    analytic = tensors[wrt].grad

    def scalar(a):
        args = [T.Tensor(x) for x in arrays]
        args[wrt] = T.Tensor(a)
        return float(T.sum_all(T.mul(fn(*args), T.Tensor(proj))).data)

    numeric = fd_gradient(scalar, arrays[wrt])
    return CheckResult(name, relative_error(analytic, numeric),
                       time.perf_counter() - t0, checked=int(numeric.size))


def run_op_checks():
    """One FD check per differentiable primitive (and per input slot where
    gradients flow through more than one argument)."""
    rng = np.random.default_rng(7)

    def arr(*shape):
        return _away_from_kinks(rng.normal(size=shape))

    x = arr(2, 3, 4, 4)
    y = arr(2, 3, 4, 4)
    w = arr(4, 3, 3, 3)
    b = arr(4)
    dw = arr(3, 1, 3, 3)
    gamma = arr(3)
    beta = arr(3)
    rmean = rng.normal(size=3)
    rvar = rng.uniform(0.5, 2.0, size=3)
    idx = rng.integers(0, 16, size=(2, 16, 5))
    checks = [
        ("add", lambda a, c: T.add(a, c), [x, y], 0),
        ("add.rhs", lambda a, c: T.add(a, c), [x, y], 1),
        ("sub", lambda a, c: T.sub(a, c), [x, y], 0),
        ("mul", lambda a, c: T.mul(a, c), [x, y], 1),
        ("div", lambda a, c: T.div(a, c), [x, np.abs(y) + 0.5], 1),
        ("add_scalar", lambda a: T.add_scalar(a, 0.7), [x], 0),
        ("mul_scalar", lambda a: T.mul_scalar(a, -1.3), [x], 0),
        ("relu", T.relu, [x], 0),
        ("gelu", T.gelu, [x], 0),
        ("sigmoid", T.sigmoid, [x], 0),
        ("softplus", T.softplus, [x], 0),
        ("softmax_channel", T.softmax_channel, [x], 0),
        ("log_softmax_channel", T.log_softmax_channel, [x], 0),
        ("conv2d.x", lambda a, ww, bb: T.conv2d(a, ww, bb, padding=1),
         [x, w, b], 0),
        ("conv2d.w", lambda a, ww, bb: T.conv2d(a, ww, bb, padding=1),
         [x, w, b], 1),
        ("conv2d.b", lambda a, ww, bb: T.conv2d(a, ww, bb, padding=1),
         [x, w, b], 2),
        ("conv2d.strided", lambda a, ww: T.conv2d(a, ww, stride=2, padding=1),
         [arr(1, 3, 6, 6), w], 0),
        ("depthwise.x", lambda a, ww: T.depthwise_conv2d(a, ww), [x, dw], 0),
        ("depthwise.w", lambda a, ww: T.depthwise_conv2d(a, ww), [x, dw], 1),
        ("batchnorm_train.x",
         lambda a, g, bb: T.batchnorm2d_train(a, g, bb)[0], [x, gamma, beta], 0),
        ("batchnorm_train.gamma",
         lambda a, g, bb: T.batchnorm2d_train(a, g, bb)[0], [x, gamma, beta], 1),
        ("batchnorm_eval.x",
         lambda a, g, bb: T.batchnorm2d_eval(a, g, bb, rmean, rvar),
         [x, gamma, beta], 0),
        ("upsample2x.nearest", lambda a: T.upsample2x(a, "nearest"), [x], 0),
        ("upsample2x.bilinear", lambda a: T.upsample2x(a, "bilinear"), [x], 0),
        ("avgpool2d", lambda a: T.avgpool2d(a, 2), [x], 0),
        ("channel_max", T.channel_max, [x], 0),
        ("channel_avg", T.channel_avg, [x], 0),
        ("concat_channel", lambda a, c: T.concat_channel([a, c]), [x, y], 1),
        ("reshape", lambda a: T.reshape(a, (2, 3, 16)), [x], 0),
        ("sum_axes", lambda a: T.sum_axes(a, (1, 3)), [x], 0),
        ("sum_all", T.sum_all, [x], 0),
        ("mean_all", T.mean_all, [x], 0),
        ("gather_nodes", lambda a: T.gather_nodes(T.reshape(a, (2, 3, 16)), idx),
         [x], 0),
        ("broadcast_last", lambda a: T.broadcast_last(T.reshape(a, (2, 3, 16, 1)), 4),
         [x], 0),
        ("max_lastdim", lambda a: T.max_lastdim(T.reshape(a, (2, 3, 4, 2, 2))),
         [x], 0),
    ]
    return [check_fn(name, fn, arrays, wrt) for name, fn, arrays, wrt in checks]


def check_decoder(samples_per_param=2, seed=0):
    """FD check of the full cascade decoder on a toy pyramid.

    Samples coordinates from every parameter and from each pyramid input,
    comparing analytic gradients of a fixed projection of the aggregate
    logits against central differences.
    """
    t0 = time.perf_counter()
    cfg = DecoderConfig(classes=3, stage_channels=(64, 40, 16, 8),
                        k=64, reductions=(1, 1, 1, 1))
    rng = np.random.default_rng(seed)
    decoder = GCascadeDecoder(cfg, rng)
    # Zero-initialized biases put batchnorm+relu stacks exactly on their
    # kinks (a 1x1 stage normalizes to zero, so the relu input IS beta);
    # jitter every parameter so the check runs at a generic smooth point.
    jitter = np.random.default_rng(seed + 1)
    for _, p in decoder.named_parameters():
        p.data = p.data + 0.05 * jitter.normal(size=p.data.shape)
    # pyramid for a 32x32 input, deepest first: 1x1, 2x2, 4x4, 8x8
    shapes = [(1, 64, 1, 1), (1, 40, 2, 2), (1, 16, 4, 4), (1, 8, 8, 8)]
    feats_np = [_away_from_kinks(rng.normal(size=s) * 0.5) for s in shapes]
    proj = None

    feats_t = [T.Tensor(f, requires_grad=True) for f in feats_np]
    with T.Tape() as tape:
        preds = decoder(feats_t)
        out = preds.aggregate
        proj = _projection(out.shape, np.random.default_rng(5))
        loss = T.sum_all(T.mul(out, T.Tensor(proj)))
        T.backward(loss, tape)

    def loss_now():
        preds = decoder([T.Tensor(f) for f in feats_np])
        return float(T.sum_all(T.mul(preds.aggregate, T.Tensor(proj))).data)

    # Central differences carry rounding noise ~ eps*|f|/(2*step); a
    # coordinate whose true gradient sits below that floor (conv biases
    # feeding train-mode batchnorm have exactly zero gradient) would
    # compare pure noise against zero. Scale the comparison floor with
    # |f| so such coordinates are judged absolutely, everything else
    # relatively.
    floor = max(1e-6, 1e-4 * abs(float(loss.data)))

    def fd_at(flat, j, step):
        keep = flat[j]
        flat[j] = keep + step
        hi = loss_now()
        flat[j] = keep - step
        lo = loss_now()
        flat[j] = keep
        return (hi - lo) / (2 * step)

    def fd_refined(flat, j):
        """FD estimate validated by step refinement, or None at a crease.

        An estimate contaminated by a crease inside the stencil changes
        when the step shrinks past the crease; a clean one reproduces to
        ~1e-8. Two successive steps agreeing to 1e-4 certify the estimate.
        """
        prev = fd_at(flat, j, FD_STEP)
        for step in (FD_STEP / 10, FD_STEP / 100):
            cur = fd_at(flat, j, step)
            if relative_error(prev, cur, floor=floor) < 1e-4:
                return cur
            prev = cur
        return None

    worst = 0.0
    checked = 0
    skipped = 0

    def probe(flat, grad, j):
        nonlocal worst, checked, skipped
        numeric = fd_refined(flat, j)
        if numeric is None:
            skipped += 1
            return
        checked += 1
        worst = max(worst, relative_error(grad[j], numeric, floor=floor))

    coord_rng = np.random.default_rng(11)
    for name, p in decoder.named_parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        n_coords = min(samples_per_param, flat.size)
        for j in coord_rng.choice(flat.size, size=n_coords, replace=False):
            probe(flat, grad, j)
    for t, f in zip(feats_t, feats_np):
        flat = f.reshape(-1)
        grad = t.grad.reshape(-1)
        for j in coord_rng.choice(flat.size, size=4, replace=False):
            probe(flat, grad, j)
    return CheckResult("decoder.toy_pyramid", worst,
                       time.perf_counter() - t0, checked, skipped)


def run_all(samples_per_param=2, seed=0):
    """-> (results, max_rel_err). Forces 64-bit for the duration."""
    previous = T.get_precision()
    T.set_precision("f64")
    try:
        results = run_op_checks()
        results.append(check_decoder(samples_per_param=samples_per_param,
                                     seed=seed))
    finally:
        T.set_precision(previous)
    return results, max(r.max_rel_err for r in results)
