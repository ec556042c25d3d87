import json
import shutil
from collections import deque
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgfd.mgraph import (
    CSRView,
    FeatureShapeError,
    HeteroSpec,
    LabelRangeError,
    MissingFileError,
    MultiplexGraph,
    NodeIndexError,
    SbmSpec,
    count_cross_edges,
    count_fetched_nodes,
    generate,
    heterophilous_block_probs,
    load_dataset,
    make_heterophilous_views,
    make_production_split,
    neighbor_sample,
    node_groups,
    remove_cross_edges,
    save_dataset,
    synth_multiplex_sbm,
)

FIXTURES = Path(__file__).parent / "fixtures"


def graph_from_edges(n, views, d=2, k=2, seed=0):
    rng = np.random.default_rng(seed)
    csr = [CSRView.from_edges(n, [u for u, _ in e], [v for _, v in e]) for e in views]
    return MultiplexGraph(tuple(csr), rng.standard_normal((n, d)), np.arange(n) % k, k)


def random_graph(n, r, p, seed):
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(r):
        iu, ju = np.triu_indices(n, 1)
        keep = rng.random(iu.size) < p
        views.append(list(zip(iu[keep].tolist(), ju[keep].tolist())))
    return graph_from_edges(n, views, seed=seed), views


def bfs_count(n, edge_lists, targets, layers):
    adj = [set() for _ in range(n)]
    for edges in edge_lists:
        for u, v in edges:
            if u != v:
                adj[u].add(v)
                adj[v].add(u)
    dist = {t: 0 for t in targets}
    q = deque(targets)
    while q:
        v = q.popleft()
        if dist[v] == layers:
            continue
        for u in adj[v]:
            if u not in dist:
                dist[u] = dist[v] + 1
                q.append(u)
    return len(dist)


# -- loading ----------------------------------------------------------------


def test_load_toy_fixture():
    g, splits = load_dataset(FIXTURES / "toy3")
    assert (g.n, g.r, g.d, g.k) == (3, 2, 2, 2)
    assert g.view_names == ("pap", "psp")
    # duplicate 1-2 line collapses to one symmetric entry pair
    assert g.views[0].nnz == 4
    np.testing.assert_array_equal(g.views[0].neighbors(1), [0, 2])
    assert all(v.is_symmetric() for v in g.views)
    np.testing.assert_array_equal(splits.test, [2])


def _copy_fixture(tmp_path):
    dst = tmp_path / "ds"
    shutil.copytree(FIXTURES / "toy3", dst)
    return dst


def test_load_rejects_out_of_range_edge(tmp_path):
    ds = _copy_fixture(tmp_path)
    (ds / "view_1.edges").write_text("0 99\n")
    with pytest.raises(NodeIndexError):
        load_dataset(ds)


def test_load_distinct_errors(tmp_path):
    ds = _copy_fixture(tmp_path)
    (ds / "labels.csv").write_text("0\n1\n5\n")
    with pytest.raises(LabelRangeError):
        load_dataset(ds)
    ds = _copy_fixture(tmp_path / "b")
    (ds / "features.csv").write_text("1,2\n3,4\n")
    with pytest.raises(FeatureShapeError):
        load_dataset(ds)
    ds = _copy_fixture(tmp_path / "c")
    (ds / "splits.json").unlink()
    with pytest.raises(MissingFileError):
        load_dataset(ds)


def test_save_load_roundtrip_bit_exact(tmp_path):
    g, splits = synth_multiplex_sbm(SbmSpec(n=40, k=2, block_probs=([[0.3, 0.05], [0.05, 0.3]],), d=3, seed=1))
    save_dataset(g, splits, tmp_path / "a")
    g2, s2 = load_dataset(tmp_path / "a")
    assert np.array_equal(g.x, g2.x) and np.array_equal(g.y, g2.y)
    assert np.array_equal(g.views[0].indices, g2.views[0].indices)
    assert np.array_equal(splits.train, s2.train)


# -- cross-edge removal -----------------------------------------------------


def test_remove_cross_edges_cases():
    g = graph_from_edges(3, [[(0, 1), (1, 2)]])
    h = remove_cross_edges(g, [2])
    np.testing.assert_array_equal(h.views[0].neighbors(1), [0])
    assert h.views[0].num_edges == 1
    for ind in ([], [0, 1, 2]):
        same = remove_cross_edges(g, ind)
        assert np.array_equal(same.views[0].indices, g.views[0].indices)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sets(st.integers(0, 29), max_size=30))
def test_remove_cross_edges_properties(seed, ind):
    g, _ = random_graph(30, 2, 0.15, seed)
    ind = sorted(ind)
    h = remove_cross_edges(g, ind)
    assert count_cross_edges(h, ind) == 0
    assert all(v.is_symmetric() for v in h.views)
    again = remove_cross_edges(h, ind)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(h.views, again.views))
    inside = np.zeros(30, dtype=bool)
    inside[ind] = True
    for old, new in zip(g.views, h.views):
        u, v = old.edge_list()
        kept = set(zip(*new.edge_list()))
        for a, b in zip(u.tolist(), v.tolist()):
            if inside[a] == inside[b]:
                assert (a, b) in kept


# -- sampling ---------------------------------------------------------------


def test_neighbor_sample_contract():
    star = graph_from_edges(101, [[(0, i) for i in range(1, 101)], [(0, 1), (0, 2), (0, 3)]])
    s = neighbor_sample(star, 0, 10, seed=4)
    assert len(s[0]) == 10 and len(set(s[0].tolist())) == 10
    np.testing.assert_array_equal(s[1], [1, 2, 3])
    again = neighbor_sample(star, 0, 10, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(s, again))
    with pytest.raises(ValueError):
        neighbor_sample(star, 0, 0)


# -- fetched nodes ----------------------------------------------------------


def test_fetch_count_simple_cases():
    g = graph_from_edges(6, [[(0, 1), (0, 2), (0, 3)], [(4, 5)]])
    assert count_fetched_nodes(g, [5], 3) == 2
    assert count_fetched_nodes(g, [0], 1) == 4
    iso = graph_from_edges(3, [[]])
    assert count_fetched_nodes(iso, [1], 5) == 1


def test_fetch_count_matches_bfs():
    rng = np.random.default_rng(12)
    g, views = random_graph(200, 2, 0.01, 12)
    targets = rng.choice(200, 10, replace=False).tolist()
    assert count_fetched_nodes(g, targets, 2) == bfs_count(200, views, targets, 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_fetch_count_monotone_and_bounded(seed):
    g, _ = random_graph(50, 2, 0.03, seed)
    counts = [count_fetched_nodes(g, [0, 7], L) for L in range(1, 6)]
    assert all(a <= b for a, b in zip(counts, counts[1:]))
    assert counts[-1] <= 50


# -- generators -------------------------------------------------------------


def test_sbm_degenerate_cases():
    g, _ = synth_multiplex_sbm(SbmSpec(n=30, k=2, block_probs=([[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]), seed=2))
    sizes = np.bincount(g.y)
    assert g.views[0].num_edges == sum(s * (s - 1) // 2 for s in sizes)
    u, v = g.views[0].edge_list()
    assert np.all(g.y[u] == g.y[v])
    assert g.views[1].nnz == 0


def test_sbm_edge_count_binomial():
    p_in, p_out = 0.02, 0.004
    spec = SbmSpec(n=1000, k=4, block_probs=(np.where(np.eye(4) > 0, p_in, p_out).tolist(),), seed=5)
    g, _ = synth_multiplex_sbm(spec)
    sizes = np.bincount(g.y)
    intra = sum(s * (s - 1) / 2 for s in sizes)
    inter = (1000 * 999 / 2) - intra
    mean = intra * p_in + inter * p_out
    sd = np.sqrt(intra * p_in * (1 - p_in) + inter * p_out * (1 - p_out))
    assert abs(g.views[0].num_edges - mean) < 3 * sd


def test_sbm_rejects_bad_probability():
    with pytest.raises(ValueError):
        synth_multiplex_sbm(SbmSpec(n=20, k=2, block_probs=([[1.5, 0.0], [0.0, 0.1]],)))


def test_generators_are_deterministic():
    spec = HeteroSpec(n=300, k=3, p_in=0.05, p_out=0.005, p_noise=0.02, seed=9)
    a, sa = make_heterophilous_views(spec)
    b, sb = make_heterophilous_views(spec)
    assert np.array_equal(a.x, b.x) and np.array_equal(sa.test, sb.test)
    assert all(np.array_equal(u.indices, v.indices) for u, v in zip(a.views, b.views))
    assert all(v.is_symmetric() for v in a.views)


def test_hetero_group_a_only_is_assortative_in_view1():
    spec = HeteroSpec(n=200, k=2, p_in=0.2, p_out=0.0, p_noise=0.2, group_a_frac=1.0, seed=1)
    g, _ = make_heterophilous_views(spec)
    u, v = g.views[0].edge_list()
    assert u.size > 0 and np.all(g.y[u] == g.y[v])
    assert np.all(node_groups(spec) == 0)


def test_hetero_intra_class_rate_binomial():
    spec = HeteroSpec(n=1200, k=3, p_in=0.03, p_out=0.003, p_noise=0.01, seed=4)
    g, _ = make_heterophilous_views(spec)
    grp = node_groups(spec)
    a = np.flatnonzero(grp == 0)
    u, v = g.views[0].edge_list()
    both_a = (grp[u] == 0) & (grp[v] == 0)
    same = both_a & (g.y[u] == g.y[v])
    sizes = np.bincount(g.y[a], minlength=3)
    pairs = sum(s * (s - 1) / 2 for s in sizes)
    mean, sd = pairs * spec.p_in, np.sqrt(pairs * spec.p_in * (1 - spec.p_in))
    assert abs(int(same.sum()) - mean) < 3 * sd


def test_hetero_block_layout():
    spec = HeteroSpec(n=10, k=2, p_in=0.5, p_out=0.1, p_noise=0.2, p_cross=0.05, p_noise_out=0.3)
    v1, v2 = heterophilous_block_probs(spec)
    np.testing.assert_array_equal(v1[:2, :2], [[0.5, 0.1], [0.1, 0.5]])
    np.testing.assert_array_equal(v1[2:, 2:], [[0.2, 0.3], [0.3, 0.2]])
    np.testing.assert_array_equal(v2[2:, 2:], v1[:2, :2])
    assert np.all(v1[:2, 2:] == 0.05)


def test_generate_from_json_spec():
    doc = json.loads((FIXTURES / "small_sbm.json").read_text())
    g, splits = generate(doc)
    assert g.r == 2 and g.n == 120 and g.view_names == ("assortative", "noisy")
    for c in range(g.k):
        assert np.any(g.y[splits.train] == c)


def test_production_split_sizes():
    _, splits = synth_multiplex_sbm(SbmSpec(n=200, k=2, block_probs=([[0.1, 0.0], [0.0, 0.1]],), seed=0))
    prod = make_production_split(splits, 0.2, seed=3)
    assert prod.ind.size == round(0.2 * splits.test.size)
    assert np.array_equal(np.sort(np.concatenate([prod.obs, prod.ind])), np.sort(splits.test))
    assert not set(prod.obs.tolist()) & set(prod.ind.tolist())
