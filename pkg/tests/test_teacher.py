import numpy as np
import pytest

from mgfd.checkpoint import CheckpointError
from mgfd.mgraph import CSRView, MultiplexGraph, SbmSpec, SplitSpec, synth_multiplex_sbm
from mgfd.numkit import AdamConfig, ParamTensor, grad_check, one_hot, row_softmax
from mgfd.teacher import (
    GnnLayerParams,
    TeacherConfig,
    TeacherModel,
    export_soft_labels,
    gcn_layer_forward,
    layer_backward,
    layer_forward,
    sage_layer_forward,
    teacher_forward,
    teacher_loss_and_grads,
    train_teacher,
)


def rand_view(n, p, seed):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    return CSRView.from_edges(n, iu[keep], ju[keep])


def dense_adj(view):
    a = np.zeros((view.n, view.n))
    a[view.rows, view.indices] = 1.0
    return a


def layer(kind, w_neigh, bias, w_self=None):
    return GnnLayerParams(kind, ParamTensor(w_neigh), ParamTensor(bias), None if w_self is None else ParamTensor(w_self))


# -- layers -----------------------------------------------------------------


def test_sage_identity_on_edgeless_view():
    view = CSRView.from_edges(4, [], [])
    h = np.arange(12.0).reshape(4, 3)
    p = layer("sage", np.ones((3, 3)), np.zeros((1, 3)), np.eye(3))
    np.testing.assert_array_equal(sage_layer_forward(view, h, p), h)


def test_sage_single_edge_copies_neighbor():
    view = CSRView.from_edges(2, [0], [1])
    h = np.array([[1.0, 2.0], [3.0, 4.0]])
    p = layer("sage", np.eye(2), np.zeros((1, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(sage_layer_forward(view, h, p)[0], h[1])


def test_sage_matches_dense_oracle():
    rng = np.random.default_rng(0)
    view = rand_view(6, 0.4, 1)
    h = rng.standard_normal((6, 3))
    ws, wn, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((1, 2))
    a = dense_adj(view)
    deg = a.sum(1, keepdims=True)
    mean_op = np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)
    want = mean_op @ h @ wn + h @ ws + b
    got = sage_layer_forward(view, h, layer("sage", wn, b, ws))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_gcn_edgeless_and_single_edge():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((3, 2))
    w = rng.standard_normal((2, 2))
    b = rng.standard_normal((1, 2))
    empty = CSRView.from_edges(3, [], [])
    np.testing.assert_allclose(gcn_layer_forward(empty, h, layer("gcn", w, b)), h @ w + b, atol=1e-15)
    view = CSRView.from_edges(2, [0], [1])
    w_edges, _ = view.gcn_norm
    assert w_edges[0] == pytest.approx(0.5)


def test_gcn_matches_dense_oracle():
    rng = np.random.default_rng(2)
    view = rand_view(6, 0.4, 3)
    h = rng.standard_normal((6, 3))
    w, b = rng.standard_normal((3, 2)), rng.standard_normal((1, 2))
    a = dense_adj(view) + np.eye(6)
    dinv = 1 / np.sqrt(a.sum(1))
    want = (dinv[:, None] * a * dinv[None, :]) @ h @ w + b
    np.testing.assert_allclose(gcn_layer_forward(view, h, layer("gcn", w, b)), want, rtol=0, atol=1e-10)


@pytest.mark.parametrize("kind", ["sage", "gcn"])
def test_layer_input_gradient(kind):
    rng = np.random.default_rng(4)
    view = rand_view(7, 0.35, 5)
    p = GnnLayerParams.init(kind, 3, 2, rng)
    h = rng.standard_normal((7, 3))
    g = rng.standard_normal((7, 2))

    def f(z):
        return float((layer_forward(view, z, p)[0] * g).sum())

    def df(z):
        out, agg = layer_forward(view, z, p)
        return layer_backward(view, z, agg, p, g)

    rep = grad_check(f, df, h)
    assert rep.passed, rep


# -- model ------------------------------------------------------------------


def small_graph(r=2, n=12, seed=0):
    views = tuple(rand_view(n, 0.3, seed + i) for i in range(r))
    rng = np.random.default_rng(seed)
    return MultiplexGraph(views, rng.standard_normal((n, 4)), rng.integers(0, 3, n), 3)


def test_single_view_collapse():
    g = small_graph(r=1)
    model = TeacherModel.init(4, 3, 1, TeacherConfig(hidden=5), np.random.default_rng(0))
    out = teacher_forward(model, g)
    assert np.array_equal(out.integrated, out.view_logits[0])


def test_mean_mode_equal_views_collapse():
    g1 = small_graph(r=1)
    g = g1.with_views([g1.views[0], g1.views[0]])
    model = TeacherModel.init(4, 3, 2, TeacherConfig(hidden=5), np.random.default_rng(0))
    for a, b in zip(model.stacks[0], model.stacks[1]):
        for pa, pb in zip(a.named("x").values(), b.named("x").values()):
            pb.value[...] = pa.value
    out = teacher_forward(model, g)
    np.testing.assert_allclose(out.integrated, out.view_logits[0], rtol=0, atol=1e-15)


def test_learned_alpha_weighted_sum():
    g = small_graph()
    model = TeacherModel.init(4, 3, 2, TeacherConfig(hidden=5, integration="learned"), np.random.default_rng(0))
    model.att_logits.value[...] = np.log([[0.3, 0.7]])
    out = teacher_forward(model, g)
    np.testing.assert_allclose(out.alpha, [0.3, 0.7], atol=1e-15)
    np.testing.assert_allclose(out.integrated, 0.3 * out.view_logits[0] + 0.7 * out.view_logits[1], rtol=0, atol=1e-12)


def test_isolated_node_does_not_change_sage_rows():
    g = small_graph()
    model = TeacherModel.init(4, 3, 2, TeacherConfig(hidden=5), np.random.default_rng(0))
    base = teacher_forward(model, g).integrated
    views = [CSRView(np.append(v.indptr, v.indptr[-1]), v.indices) for v in g.views]
    g2 = MultiplexGraph(tuple(views), np.vstack([g.x, np.ones((1, 4))]), np.append(g.y, 0), 3)
    np.testing.assert_array_equal(teacher_forward(model, g2).integrated[:-1], base)


def test_argmax_shift_invariance():
    rng = np.random.default_rng(3)
    z = [rng.standard_normal((8, 3)) for _ in range(2)]
    alpha = row_softmax(rng.standard_normal((1, 2)))[0]
    shift = rng.standard_normal((1, 3)) * 5
    a = sum(w * zi for w, zi in zip(alpha, z)).argmax(1)
    b = sum(w * (zi + shift) for w, zi in zip(alpha, z))
    assert np.array_equal(a, (b - shift).argmax(1))


@pytest.mark.parametrize("kind,integration", [("sage", "mean"), ("gcn", "learned")])
def test_teacher_loss_gradient(kind, integration):
    g = small_graph(seed=5)
    rng = np.random.default_rng(5)
    model = TeacherModel.init(4, 3, 2, TeacherConfig(kind=kind, integration=integration, hidden=4), rng)
    model.att_logits.value[...] = rng.standard_normal((1, 2))
    y = one_hot(g.y, 3)
    train = np.arange(0, 12, 2)
    for name, p in model.named_params().items():
        def f(v, p=p):
            old = p.value.copy()
            p.value[...] = v
            loss = teacher_loss_and_grads(model, g, y, train)
            p.value[...] = old
            return loss

        def df(v, p=p):
            teacher_loss_and_grads(model, g, y, train)
            return p.grad.copy()

        rep = grad_check(f, df, p.value.copy())
        assert rep.passed, (name, rep)


# -- training ---------------------------------------------------------------


def clique_graph():
    spec = SbmSpec(n=60, k=2, block_probs=([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]), d=4, signal=3.0, seed=0)
    return synth_multiplex_sbm(spec)


def test_train_on_cliques_reaches_high_accuracy():
    g, splits = clique_graph()
    model, history = train_teacher(g, splits, TeacherConfig(hidden=16, epochs=200, seed=0))
    assert max(h.val_acc for h in history) >= 0.95
    pred = teacher_forward(model, g).integrated.argmax(1)
    assert np.mean(pred[splits.val] == g.y[splits.val]) >= 0.95


def test_zero_epochs_and_determinism():
    g, splits = clique_graph()
    m0, log0 = train_teacher(g, splits, TeacherConfig(hidden=8, epochs=0, seed=1))
    init = TeacherModel.init(g.d, g.k, g.r, TeacherConfig(hidden=8, seed=1), np.random.default_rng(1))
    assert log0 == []
    assert all(np.array_equal(a.value, b.value) for a, b in zip(m0.parameters(), init.parameters()))
    cfg = TeacherConfig(hidden=8, epochs=15, seed=7, dropout=0.2, adam=AdamConfig(weight_decay=5e-4))
    a, la = train_teacher(g, splits, cfg)
    b, lb = train_teacher(g, splits, cfg)
    assert la == lb
    assert all(np.array_equal(x.value, y.value) for x, y in zip(a.parameters(), b.parameters()))


def test_train_requires_val():
    g, splits = clique_graph()
    with pytest.raises(Exception):
        train_teacher(g, SplitSpec(splits.train, [], splits.test), TeacherConfig(epochs=1))


# -- soft labels and checkpoints -------------------------------------------


def test_export_soft_labels():
    g = small_graph(seed=2)
    model = TeacherModel.init(4, 3, 2, TeacherConfig(hidden=5, integration="learned"), np.random.default_rng(2))
    model.att_logits.value[...] = [[0.2, -0.4]]
    empty = export_soft_labels(model, g, [])
    assert len(empty) == 0 and all(p.shape == (0, 3) for p in empty.probs)
    scope = [1, 4, 7]
    b = export_soft_labels(model, g, scope)
    assert b.n_teachers == 3
    for p in b.probs:
        assert np.all(np.abs(p.sum(1) - 1) < 1e-8)
    out = teacher_forward(model, g)
    alpha = row_softmax(model.att_logits.value)[0]
    recomputed = row_softmax(alpha[0] * out.view_logits[0] + alpha[1] * out.view_logits[1])[scope]
    np.testing.assert_allclose(b.whole, recomputed, rtol=0, atol=1e-12)


def test_checkpoint_roundtrip_and_shape_check():
    g = small_graph()
    model = TeacherModel.init(4, 3, 2, TeacherConfig(hidden=5), np.random.default_rng(0))
    doc = model.to_dict()
    back = TeacherModel.from_dict(doc)
    assert np.array_equal(teacher_forward(back, g).integrated, teacher_forward(model, g).integrated)
    doc["params"]["classifier"]["shape"] = [3, 5]
    with pytest.raises(CheckpointError):
        TeacherModel.from_dict(doc)
