"""KNN graph construction against the brute-force oracle, and the graph
convolution variants."""

import numpy as np
import pytest

from gcascade import graph as G
from gcascade import tensor as T

import oracles
from test_tensor import _proj_loss, assert_grads_close


def test_knn_matches_oracle_on_small_grids():
    rng = np.random.default_rng(21)
    draws = 0
    for h in range(1, 9):
        for w in range(1, 9):
            feats = rng.standard_normal((2, 3, h, w)).astype(np.float64)
            m = h * w
            k = int(rng.integers(1, m + 1))
            dilation = int(rng.integers(1, m // k + 1))
            g = G.build_knn_graph(feats, k, dilation=dilation)
            ref = oracles.knn_graph_oracle(feats, k, dilation=dilation)
            assert np.array_equal(g.indices, ref), (h, w, k, dilation)
            draws += 1
    assert draws == 64


def test_knn_matches_oracle_with_reduction():
    rng = np.random.default_rng(22)
    for h, w, r in [(4, 4, 2), (8, 4, 2), (8, 8, 4), (6, 6, 2)]:
        feats = rng.standard_normal((1, 4, h, w)).astype(np.float64)
        m = (h // r) * (w // r)
        k = min(3, m)
        g = G.build_knn_graph(feats, k, reduction=r)
        ref = oracles.knn_graph_oracle(feats, k, reduction=r)
        assert np.array_equal(g.indices, ref)
        assert g.cand_grid == (h // r, w // r)


def test_self_loop_is_first_without_reduction():
    rng = np.random.default_rng(23)
    feats = rng.standard_normal((3, 5, 6, 7)).astype(np.float32)
    g = G.build_knn_graph(feats, 4)
    nodes = np.arange(6 * 7)
    for b in range(3):
        assert np.array_equal(g.indices[b, :, 0], nodes)


def test_dilated_selection_takes_every_dth():
    # 1x9 strip with feature j at column j: distance from node 0 grows with j,
    # so the ascending order is 0..8 and k=3, d=2 picks 0, 2, 4
    feats = np.arange(9, dtype=np.float32).reshape(1, 1, 1, 9)
    g = G.build_knn_graph(feats, 3, dilation=2)
    assert g.indices[0, 0].tolist() == [0, 2, 4]


def test_knn_rejects_oversized_request():
    feats = np.zeros((1, 2, 3, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        G.build_knn_graph(feats, 10)
    with pytest.raises(ValueError):
        G.build_knn_graph(feats, 5, dilation=2)
    with pytest.raises(ValueError):
        G.build_knn_graph(feats, 1, reduction=2)  # 3x3 not divisible


def test_distance_paths_pick_same_neighbors(monkeypatch):
    rng = np.random.default_rng(24)
    feats = rng.standard_normal((2, 6, 8, 8)).astype(np.float32)
    g_small = G.build_knn_graph(feats, 5, dilation=2)
    monkeypatch.setattr(G, "EXACT_DIST_WORK", 0)
    g_large = G.build_knn_graph(feats, 5, dilation=2)
    assert np.array_equal(g_small.indices, g_large.indices)


def test_expansion_path_keeps_self_loop(monkeypatch):
    monkeypatch.setattr(G, "EXACT_DIST_WORK", 0)
    rng = np.random.default_rng(25)
    feats = rng.standard_normal((2, 4, 7, 7)).astype(np.float32)
    g = G.build_knn_graph(feats, 3)
    nodes = np.arange(49)
    for b in range(2):
        assert np.array_equal(g.indices[b, :, 0], nodes)


def test_graph_determinism():
    rng = np.random.default_rng(26)
    feats = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
    a = G.build_knn_graph(feats, 4, dilation=1)
    b = G.build_knn_graph(feats.copy(), 4, dilation=1)
    assert np.array_equal(a.indices, b.indices)


def test_graph_rows_layout():
    feats = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
    g = G.build_knn_graph(feats, 2)
    rows = G.graph_rows(g)
    assert rows.shape == (1 * 4 * 2, 4)
    assert rows[0].tolist() == [0, 0, 0, 0]  # self loop of node 0


# ---------------------------------------------------------------------------
# dynamic graph convolutions

def _rand_input(rng, c=4, h=4, w=4, n=2):
    return rng.standard_normal((n, c, h, w))


@pytest.mark.parametrize("variant", G.VARIANTS)
def test_dynconv_preserves_shape(variant):
    rng = np.random.default_rng(27)
    x = _rand_input(rng).astype(np.float32)
    dyn = G.DynConv(4, variant, np.random.default_rng(0))
    g = G.build_knn_graph(x, 3)
    out = dyn(T.Tensor(x), g)
    assert out.shape == x.shape


def test_mr_and_edge_have_identical_parameter_shapes():
    mr = G.DynConv(8, "mr", np.random.default_rng(0))
    edge = G.DynConv(8, "edge", np.random.default_rng(0))
    s_mr = {k: v.shape for k, v in mr.named_parameters()}
    s_edge = {k: v.shape for k, v in edge.named_parameters()}
    assert s_mr == s_edge


def test_mr_with_self_only_neighborhood_is_plain_conv():
    # k = 1 keeps only the self loop, so max_j(x_j - x_i) = 0 and the output
    # is W [x, 0] + b, i.e. the first half of W applied to x
    rng = np.random.default_rng(28)
    x = rng.standard_normal((1, 3, 2, 2)).astype(np.float64)
    dyn = G.DynConv(3, "mr", np.random.default_rng(1))
    for p in dyn.parameters():
        p.data = p.data.astype(np.float64)
    g = G.build_knn_graph(x, 1)
    out = dyn(T.Tensor(x), g)
    wfull = dyn.w.weight.data
    expect = np.einsum("oc,nchw->nohw", wfull[:, :3, 0, 0], x) \
        + dyn.w.bias.data[None, :, None, None]
    assert oracles.rel_err(out.data, expect) < 1e-12


def test_gin_matches_hand_formula():
    rng = np.random.default_rng(29)
    x = rng.standard_normal((1, 2, 2, 2)).astype(np.float64)
    dyn = G.DynConv(2, "gin", np.random.default_rng(2))
    for p in dyn.parameters():
        p.data = p.data.astype(np.float64)
    dyn.eps.data = np.asarray(0.25, dtype=np.float64).reshape(())
    g = G.build_knn_graph(x, 2)
    out = dyn(T.Tensor(x), g)

    flat = x.reshape(1, 2, 4)
    summed = np.zeros_like(flat)
    for node in range(4):
        summed[0, :, node] = flat[0][:, g.indices[0, node]].sum(axis=1)
    pre = (1.25 * flat + summed).reshape(1, 2, 2, 2)
    expect = np.einsum("oc,nchw->nohw", dyn.w.weight.data[:, :, 0, 0], pre) \
        + dyn.w.bias.data[None, :, None, None]
    assert oracles.rel_err(out.data, expect) < 1e-12


@pytest.mark.parametrize("variant", G.VARIANTS)
def test_grad_dynconv(variant):
    rng = np.random.default_rng(30)
    x = _rand_input(rng, c=3, h=3, w=3)
    dyn = G.DynConv(3, variant, np.random.default_rng(3))
    params = [(name, p) for name, p in dyn.named_parameters()]
    arrays = [x] + [p.data.astype(np.float64) for _, p in params]

    def build(ts):
        for (name, p), arr in zip(params, ts[1:]):
            p.data = arr.data
            p.requires_grad = True
        g = G.build_knn_graph(ts[0].data, 2)
        return _proj_loss(dyn(ts[0], g))

    analytic, fds = [], []
    import oracles as O
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = build(leaves)
    T.backward(loss, tape)
    grads = [leaves[0].grad] + [p.grad for _, p in params]
    for i in range(len(arrays)):
        def f(a, i=i):
            tens = [T.Tensor(arrays[j] if j != i else a) for j in range(len(arrays))]
            for t in tens:
                t.requires_grad = False
            return float(build(tens).data)
        fd = O.fd_gradient(f, arrays[i].copy())
        assert grads[i] is not None
        err = O.rel_err(grads[i], fd)
        assert err < 1e-4, "leaf %d rel err %.2e" % (i, err)


def test_grad_gcb_with_reduction():
    rng = np.random.default_rng(31)
    x = rng.standard_normal((2, 3, 4, 4))
    gcb = G.Gcb(3, "mr", np.random.default_rng(4), k=3, reduction=2)
    for p in gcb.parameters():
        p.data = p.data.astype(np.float64)

    def build(ts):
        return _proj_loss(gcb(ts[0]))

    assert_grads_close(build, [x], tol=1e-4)


def test_gcb_output_shape_and_channels():
    rng = np.random.default_rng(32)
    x = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
    gcb = G.Gcb(8, "mr", np.random.default_rng(5), k=11, reduction=2)
    out = gcb(T.Tensor(x))
    assert out.shape == x.shape


def test_gcb_clamps_k_on_tiny_grids():
    rng = np.random.default_rng(33)
    x = rng.standard_normal((1, 4, 1, 1)).astype(np.float32)
    gcb = G.Gcb(4, "mr", np.random.default_rng(6), k=11, dilation=2, reduction=4)
    out = gcb(T.Tensor(x))  # single node: k_eff = 1, no crash
    assert out.shape == x.shape
