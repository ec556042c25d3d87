"""Multiplex graphs: CSR views, on-disk format, generators, splits, fetch counting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from mgfd import kernels


class DatasetError(ValueError):
    """Base class for malformed dataset directories."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class NodeIndexError(DatasetError, IndexError):
    pass


class FeatureShapeError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


def _as_index(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.int64).reshape(-1))


@dataclass(frozen=True, eq=False)
class CSRView:
    """Symmetric adjacency of one view; no self-loops, no duplicate entries."""

    indptr: np.ndarray
    indices: np.ndarray
    # degrees used for normalisation; set on subgraphs that must match the parent graph
    norm_degrees: np.ndarray | None = None

    @classmethod
    def from_edges(cls, n: int, src, dst) -> "CSRView":
        src = _as_index(src)
        dst = _as_index(dst)
        if src.shape != dst.shape:
            raise ValueError("edge endpoint arrays differ in length")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
            raise NodeIndexError(f"edge endpoint outside [0, {n})")
        keep = src != dst
        u = np.concatenate([src[keep], dst[keep]])
        v = np.concatenate([dst[keep], src[keep]])
        key = np.unique(u * n + v)
        rows, cols = np.divmod(key, n) if key.size else (key, key)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(indptr, _as_index(cols))

    @property
    def n(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    @property
    def num_edges(self) -> int:
        return self.nnz // 2

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @cached_property
    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edge_list(self) -> tuple[np.ndarray, np.ndarray]:
        """Each undirected edge once, as ``u < v``."""
        keep = self.rows < self.indices
        return self.rows[keep], self.indices[keep]

    # normalised weights used by the GNN layers; cached per view
    @cached_property
    def _norm_deg(self) -> np.ndarray:
        deg = self.degrees if self.norm_degrees is None else self.norm_degrees
        return deg.astype(np.float64)

    @cached_property
    def mean_weights(self) -> np.ndarray:
        deg = self._norm_deg
        return np.ascontiguousarray(1.0 / deg[self.rows]) if self.nnz else np.zeros(0)

    @cached_property
    def mean_weights_t(self) -> np.ndarray:
        # transpose of D^-1 A for symmetric A: weight 1/deg(col)
        deg = self._norm_deg
        return np.ascontiguousarray(1.0 / deg[self.indices]) if self.nnz else np.zeros(0)

    @cached_property
    def gcn_norm(self) -> tuple[np.ndarray, np.ndarray]:
        """``(edge weights, self weights)`` of D~^-1/2 (A+I) D~^-1/2."""
        dt = self._norm_deg + 1.0
        inv = 1.0 / np.sqrt(dt)
        w = np.ascontiguousarray(inv[self.rows] * inv[self.indices])
        return w, 1.0 / dt

    def is_symmetric(self) -> bool:
        fwd = self.rows * self.n + self.indices
        bwd = self.indices * self.n + self.rows
        return bool(np.array_equal(np.sort(fwd), np.sort(bwd)))

    def subgraph(self, nodes: np.ndarray, keep_degrees: bool = False) -> "CSRView":
        """Induced subgraph on ``nodes`` (local ids follow the order of ``nodes``).

        With ``keep_degrees`` the normalisation uses the parent-graph degrees,
        so rows whose neighbourhood is fully inside ``nodes`` aggregate exactly
        as they would on the parent graph.
        """
        local = np.full(self.n, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.shape[0])
        lo, hi = self.indptr[nodes], self.indptr[nodes + 1]
        lens = hi - lo
        total = int(lens.sum())
        pos = np.arange(total) + np.repeat(lo - np.cumsum(lens) + lens, lens)
        cols = local[self.indices[pos]]
        rows = np.repeat(np.arange(nodes.shape[0], dtype=np.int64), lens)
        keep = cols >= 0
        indptr = np.zeros(nodes.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows[keep], minlength=nodes.shape[0]), out=indptr[1:])
        norm = self._norm_deg[nodes].astype(np.int64) if keep_degrees else None
        return CSRView(indptr, _as_index(cols[keep]), norm)


@dataclass(frozen=True, eq=False)
class MultiplexGraph:
    views: tuple[CSRView, ...]
    x: np.ndarray
    y: np.ndarray
    k: int
    view_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "x", np.ascontiguousarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", _as_index(self.y))
        if not self.view_names:
            object.__setattr__(self, "view_names", tuple(f"view{i + 1}" for i in range(len(self.views))))
        n = self.x.shape[0]
        if self.y.shape[0] != n:
            raise FeatureShapeError(f"{self.y.shape[0]} labels for {n} feature rows")
        if any(v.n != n for v in self.views):
            raise FeatureShapeError("view node count differs from feature rows")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.k):
            raise LabelRangeError(f"label outside [0, {self.k})")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def r(self) -> int:
        return len(self.views)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def with_views(self, views: Sequence[CSRView]) -> "MultiplexGraph":
        return MultiplexGraph(tuple(views), self.x, self.y, self.k, self.view_names)

    def subgraph(self, nodes, keep_degrees: bool = False) -> "MultiplexGraph":
        nodes = _as_index(nodes)
        return MultiplexGraph(tuple(v.subgraph(nodes, keep_degrees) for v in self.views), self.x[nodes], self.y[nodes], self.k, self.view_names)


@dataclass(frozen=True, eq=False)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, _as_index(getattr(self, name)))
            if getattr(self, name).size == 0:
                raise DatasetError(f"split '{name}' is empty")
        allidx = np.concatenate([self.train, self.val, self.test])
        if np.unique(allidx).size != allidx.size:
            raise DatasetError("splits overlap")

    def validate(self, n: int) -> None:
        for name in ("train", "val", "test"):
            idx = getattr(self, name)
            if idx.min() < 0 or idx.max() >= n:
                raise NodeIndexError(f"split '{name}' has an index outside [0, {n})")

    def to_json(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}


@dataclass(frozen=True, eq=False)
class ProductionSplit:
    base: SplitSpec
    obs: np.ndarray
    ind: np.ndarray
    ind_fraction: float

    @property
    def labeled(self) -> np.ndarray:
        return np.concatenate([self.base.train, self.base.val])


def make_production_split(base: SplitSpec, ind_fraction: float = 0.2, seed: int = 0) -> ProductionSplit:
    """Hold out ``round(ind_fraction * |test|)`` test nodes as the inductive set."""
    if not 0.0 <= ind_fraction <= 1.0:
        raise ValueError("ind_fraction must lie in [0, 1]")
    test = base.test
    perm = np.random.default_rng(seed).permutation(test.shape[0])
    n_ind = int(round(ind_fraction * test.shape[0]))
    ind = np.sort(test[perm[:n_ind]])
    obs = np.sort(test[perm[n_ind:]])
    return ProductionSplit(base, obs, ind, ind_fraction)


# ---------------------------------------------------------------------------
# on-disk format


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFileError(f"missing dataset file: {path}")
    return path


def load_dataset(path) -> tuple[MultiplexGraph, SplitSpec]:
    root = Path(path)
    meta = json.loads(_require(root / "meta.json").read_text(encoding="utf-8"))
    n, r, d, k = (int(meta[key]) for key in ("n", "r", "d", "k"))
    names = tuple(meta.get("view_names") or [f"view{i + 1}" for i in range(r)])
    if len(names) != r:
        raise DatasetError(f"meta.json lists {len(names)} view names for r={r}")

    views = []
    for i in range(r):
        p = _require(root / f"view_{i}.edges")
        text = p.read_text(encoding="utf-8").split()
        if len(text) % 2:
            raise DatasetError(f"{p}: odd number of endpoint tokens")
        e = np.array(text, dtype=np.int64).reshape(-1, 2) if text else np.zeros((0, 2), dtype=np.int64)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise NodeIndexError(f"{p}: node index outside [0, {n})")
        views.append(CSRView.from_edges(n, e[:, 0], e[:, 1]))

    xpath = _require(root / "features.csv")
    x = np.loadtxt(xpath, delimiter=",", dtype=np.float64, ndmin=2)
    if x.shape != (n, d):
        raise FeatureShapeError(f"{xpath}: expected {n}x{d} features, got {x.shape[0]}x{x.shape[1]}")
    ypath = _require(root / "labels.csv")
    y = np.loadtxt(ypath, dtype=np.int64, ndmin=1)
    if y.shape[0] != n:
        raise FeatureShapeError(f"{ypath}: expected {n} labels, got {y.shape[0]}")
    if y.min() < 0 or y.max() >= k:
        raise LabelRangeError(f"{ypath}: label outside [0, {k})")

    sp = json.loads(_require(root / "splits.json").read_text(encoding="utf-8"))
    splits = SplitSpec(sp["train"], sp["val"], sp["test"])
    splits.validate(n)
    return MultiplexGraph(tuple(views), x, y, k, names), splits


def save_dataset(g: MultiplexGraph, splits: SplitSpec, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"n": g.n, "r": g.r, "d": g.d, "k": g.k, "view_names": list(g.view_names)}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    for i, view in enumerate(g.views):
        u, v = view.edge_list()
        lines = "".join(f"{a} {b}\n" for a, b in zip(u.tolist(), v.tolist()))
        (root / f"view_{i}.edges").write_text(lines, encoding="utf-8")
    np.savetxt(root / "features.csv", g.x, delimiter=",", fmt="%.17g")
    np.savetxt(root / "labels.csv", g.y, fmt="%d")
    (root / "splits.json").write_text(json.dumps(splits.to_json()) + "\n", encoding="utf-8")
    return root


# ---------------------------------------------------------------------------
# structural operations


def remove_cross_edges(g: MultiplexGraph, ind) -> MultiplexGraph:
    """Drop every edge with exactly one endpoint in ``ind``, in every view."""
    inside = np.zeros(g.n, dtype=bool)
    inside[_as_index(ind)] = True
    views = []
    for view in g.views:
        u, v = view.edge_list()
        keep = inside[u] == inside[v]
        views.append(CSRView.from_edges(g.n, u[keep], v[keep]))
    return g.with_views(views)


def count_cross_edges(g: MultiplexGraph, ind) -> int:
    inside = np.zeros(g.n, dtype=bool)
    inside[_as_index(ind)] = True
    total = 0
    for view in g.views:
        u, v = view.edge_list()
        total += int(np.count_nonzero(inside[u] != inside[v]))
    return total


def _sample_row(view: CSRView, node: int, fanout: int, rng: np.random.Generator) -> np.ndarray:
    neigh = view.neighbors(node)
    if neigh.shape[0] <= fanout:
        return neigh.copy()
    return np.sort(rng.choice(neigh, size=fanout, replace=False))


def neighbor_sample(g: MultiplexGraph, node: int, fanout: int, seed: int = 0) -> list[np.ndarray]:
    """Per view: all neighbours if degree <= fanout, else a uniform sample of ``fanout``."""
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    rng = np.random.default_rng(seed)
    return [_sample_row(view, node, fanout, rng) for view in g.views]


def fetched_nodes(g: MultiplexGraph, targets, layers: int) -> np.ndarray:
    """Sorted union of the ``layers``-hop neighbourhoods of ``targets`` over all views."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    mark = np.zeros(g.n, dtype=np.uint8)
    frontier = np.unique(_as_index(targets))
    mark[frontier] = 1
    for _ in range(layers):
        before = mark.copy()
        for view in g.views:
            kernels.mark_neighbors(view.indptr, view.indices, frontier, mark)
        frontier = np.flatnonzero(mark & ~before).astype(np.int64)
        if frontier.size == 0:
            break
    return np.flatnonzero(mark).astype(np.int64)


def count_fetched_nodes(g: MultiplexGraph, targets, layers: int) -> int:
    return int(fetched_nodes(g, targets, layers).shape[0])


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class SbmSpec:
    n: int
    k: int
    block_probs: tuple  # one k x k matrix per view
    d: int = 16
    signal: float = 1.0
    seed: int = 0
    train_frac: float = 0.2
    val_frac: float = 0.2
    view_names: tuple = ()

    @property
    def r(self) -> int:
        return len(self.block_probs)


@dataclass(frozen=True)
class HeteroSpec:
    """Two views; view 1 is assortative inside group A, view 2 inside group B.

    Pairs inside the other group get edges at ``p_noise`` (same class) and
    ``p_noise_out`` (different class); leaving ``p_noise_out`` unset makes
    those edges class-blind, while ``p_noise_out > p_noise`` makes them
    disassortative.  Pairs across groups get ``p_cross``.  ``group_signal``
    shifts the two groups apart along a direction orthogonal to the class
    means.
    """

    n: int
    k: int
    p_in: float
    p_out: float
    p_noise: float
    p_cross: float = 0.0
    p_noise_out: float | None = None
    group_a_frac: float = 0.5
    d: int = 16
    signal: float = 1.0
    group_signal: float = 0.0
    seed: int = 0
    train_frac: float = 0.2
    val_frac: float = 0.2


def _check_prob(p, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError(f"{what}: probabilities must lie in [0, 1]")
    return p


def _triangle_pairs(t: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode linear indices into pairs ``i < j`` of an ``m``-set, row-major."""
    tf = t.astype(np.float64)
    i = m - 2 - np.floor(np.sqrt(-8.0 * tf + 4.0 * m * (m - 1) - 7.0) / 2.0 - 0.5)
    i = i.astype(np.int64)
    j = t + i + 1 - m * (m - 1) // 2 + (m - i) * ((m - i) - 1) // 2
    return i, j


def _block_edges(rng: np.random.Generator, members: list[np.ndarray], probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Independent Bernoulli edges per pair with block-pair probabilities.

    Draws the binomial edge count per block pair, then a uniform subset of
    that many distinct pairs, which has the same law as per-pair coin flips.
    """
    src, dst = [], []
    nb = len(members)
    for a in range(nb):
        for b in range(a, nb):
            p = float(probs[a, b])
            ma, mb = members[a].shape[0], members[b].shape[0]
            total = ma * (ma - 1) // 2 if a == b else ma * mb
            if p <= 0.0 or total == 0:
                continue
            cnt = int(rng.binomial(total, p))
            if cnt == 0:
                continue
            picks = np.sort(rng.choice(total, size=cnt, replace=False)).astype(np.int64)
            if a == b:
                i, j = _triangle_pairs(picks, ma)
                src.append(members[a][i])
                dst.append(members[a][j])
            else:
                i, j = np.divmod(picks, mb)
                src.append(members[a][i])
                dst.append(members[b][j])
    if not src:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(src), np.concatenate(dst)


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k).astype(np.int64)


def _orthonormal(rng: np.random.Generator, d: int, count: int) -> np.ndarray:
    if count > d:
        raise ValueError(f"feature dim {d} too small for {count} orthogonal directions")
    q, _ = np.linalg.qr(rng.standard_normal((d, count)))
    return q.T


def _stratified_split(rng: np.random.Generator, y: np.ndarray, k: int, train_frac: float, val_frac: float) -> SplitSpec:
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1:
        raise ValueError("need train_frac > 0, val_frac > 0 and train_frac + val_frac < 1")
    tr, va, te = [], [], []
    for c in range(k):
        idx = rng.permutation(np.flatnonzero(y == c))
        if idx.size < 3:
            raise ValueError(f"class {c} has fewer than 3 nodes; cannot split")
        n_tr = max(1, int(round(train_frac * idx.size)))
        n_va = max(1, int(round(val_frac * idx.size)))
        n_tr = min(n_tr, idx.size - 2)
        n_va = min(n_va, idx.size - n_tr - 1)
        tr.append(idx[:n_tr])
        va.append(idx[n_tr:n_tr + n_va])
        te.append(idx[n_tr + n_va:])
    return SplitSpec(np.sort(np.concatenate(tr)), np.sort(np.concatenate(va)), np.sort(np.concatenate(te)))


def synth_multiplex_sbm(spec: SbmSpec) -> tuple[MultiplexGraph, SplitSpec]:
    """Multiplex stochastic block model with class-mean Gaussian features."""
    mats = [_check_prob(p, "block_probs") for p in spec.block_probs]
    for p in mats:
        if p.shape != (spec.k, spec.k):
            raise ValueError(f"block probability matrix must be {spec.k}x{spec.k}, got {p.shape}")
        if not np.allclose(p, p.T):
            raise ValueError("block probability matrices must be symmetric")
    rng = np.random.default_rng(spec.seed)
    y = _balanced_labels(rng, spec.n, spec.k)
    members = [np.flatnonzero(y == c) for c in range(spec.k)]
    views = []
    for p in mats:
        u, v = _block_edges(rng, members, p)
        views.append(CSRView.from_edges(spec.n, u, v))
    means = _orthonormal(rng, spec.d, spec.k) * (spec.signal / np.sqrt(2.0))
    x = means[y] + rng.standard_normal((spec.n, spec.d))
    splits = _stratified_split(rng, y, spec.k, spec.train_frac, spec.val_frac)
    g = MultiplexGraph(tuple(views), x, y, spec.k, tuple(spec.view_names))
    return g, splits


def heterophilous_block_probs(spec: HeteroSpec) -> tuple[np.ndarray, np.ndarray]:
    """Block matrices over (group, class) blocks, blocks ordered A0..A(k-1), B0..B(k-1)."""
    k = spec.k
    assort = np.full((k, k), spec.p_out)
    np.fill_diagonal(assort, spec.p_in)
    noise = np.full((k, k), spec.p_noise if spec.p_noise_out is None else spec.p_noise_out)
    np.fill_diagonal(noise, spec.p_noise)
    cross = np.full((k, k), spec.p_cross)
    view1 = np.block([[assort, cross], [cross, noise]])
    view2 = np.block([[noise, cross], [cross, assort]])
    return view1, view2


def make_heterophilous_views(spec: HeteroSpec) -> tuple[MultiplexGraph, SplitSpec]:
    """Two views whose informativeness depends on the node's group."""
    for name in ("p_in", "p_out", "p_noise", "p_cross", "p_noise_out"):
        if getattr(spec, name) is not None:
            _check_prob(getattr(spec, name), name)
    if not 0.0 <= spec.group_a_frac <= 1.0:
        raise ValueError("group_a_frac must lie in [0, 1]")
    rng = np.random.default_rng(spec.seed)
    y = _balanced_labels(rng, spec.n, spec.k)
    group = np.zeros(spec.n, dtype=np.int64)
    n_b = spec.n - int(round(spec.group_a_frac * spec.n))
    group[rng.permutation(spec.n)[:n_b]] = 1
    block = group * spec.k + y
    members = [np.flatnonzero(block == b) for b in range(2 * spec.k)]
    views = []
    for p in heterophilous_block_probs(spec):
        u, v = _block_edges(rng, members, p)
        views.append(CSRView.from_edges(spec.n, u, v))
    dirs = _orthonormal(rng, spec.d, spec.k + 1)
    x = dirs[:spec.k][y] * (spec.signal / np.sqrt(2.0))
    x = x + np.outer(np.where(group == 0, 0.5, -0.5) * spec.group_signal, dirs[spec.k])
    x = x + rng.standard_normal((spec.n, spec.d))
    splits = _stratified_split(rng, y, spec.k, spec.train_frac, spec.val_frac)
    g = MultiplexGraph(tuple(views), x, y, spec.k, ("view_a", "view_b"))
    return g, splits


def node_groups(spec: HeteroSpec) -> np.ndarray:
    """Group id per node (0 = A, 1 = B) for a heterophilous spec; replays the generator's draws."""
    rng = np.random.default_rng(spec.seed)
    _balanced_labels(rng, spec.n, spec.k)
    group = np.zeros(spec.n, dtype=np.int64)
    n_b = spec.n - int(round(spec.group_a_frac * spec.n))
    group[rng.permutation(spec.n)[:n_b]] = 1
    return group


def spec_from_dict(d: dict):
    """Build an ``SbmSpec`` or ``HeteroSpec`` from a JSON-style dict with a ``kind`` key."""
    d = dict(d)
    kind = d.pop("kind", "sbm")
    if kind == "sbm":
        probs = d.pop("block_probs")
        names = tuple(d.pop("view_names", ()))
        return SbmSpec(block_probs=tuple(np.asarray(p, dtype=float).tolist() for p in probs), view_names=names, **d)
    if kind in ("heterophilous", "hetero"):
        return HeteroSpec(**d)
    raise ValueError(f"unknown generator kind {kind!r}")


def generate(spec) -> tuple[MultiplexGraph, SplitSpec]:
    if isinstance(spec, dict):
        spec = spec_from_dict(spec)
    if isinstance(spec, SbmSpec):
        return synth_multiplex_sbm(spec)
    if isinstance(spec, HeteroSpec):
        return make_heterophilous_views(spec)
    raise TypeError(f"unsupported generator spec {type(spec).__name__}")


__all__ = [
    "CSRView", "MultiplexGraph", "SplitSpec", "ProductionSplit", "SbmSpec", "HeteroSpec",
    "DatasetError", "MissingFileError", "NodeIndexError", "FeatureShapeError", "LabelRangeError",
    "load_dataset", "save_dataset", "remove_cross_edges", "count_cross_edges", "neighbor_sample",
    "fetched_nodes", "count_fetched_nodes", "synth_multiplex_sbm", "make_heterophilous_views",
    "make_production_split", "generate", "spec_from_dict", "node_groups", "heterophilous_block_probs",
]
