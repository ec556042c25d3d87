"""Accuracy metrics, the production protocol, the ideal-ensemble oracle and inference benchmarks."""

from __future__ import annotations

import csv
import json
import os
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from mgfd.distill import DistillConfig, MlpParams, StudentModel, student_predict, train_student
from mgfd.mgraph import (
    CSRView,
    MultiplexGraph,
    ProductionSplit,
    count_cross_edges,
    fetched_nodes,
    remove_cross_edges,
)
from mgfd.teacher import TeacherConfig, TeacherModel, export_soft_labels, teacher_forward, train_teacher

PROD_IND_WEIGHT = 0.2


def accuracy(pred, true, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy over an empty index set")
    pred = np.asarray(pred)
    true = np.asarray(true)
    return float(np.count_nonzero(pred[idx] == true[idx])) / idx.size


def prod_interpolate(ind_acc: float, tran_acc: float, ind_weight: float = PROD_IND_WEIGHT) -> float:
    if not 0.0 <= ind_weight <= 1.0:
        raise ValueError("ind_weight must lie in [0, 1]")
    return ind_weight * ind_acc + (1.0 - ind_weight) * tran_acc


def ideal_ensemble_accuracy(preds: Sequence, true, idx) -> float:
    """Fraction of ``idx`` on which at least one of the predictors is right."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("ideal_ensemble_accuracy over an empty index set")
    true = np.asarray(true)[idx]
    hit = np.zeros(idx.size, dtype=bool)
    for p in preds:
        hit |= np.asarray(p)[idx] == true
    return float(np.count_nonzero(hit)) / idx.size


@dataclass(frozen=True)
class TeacherBreakdown:
    view_acc: tuple[float, ...]
    integrated_acc: float
    ideal_acc: float


def teacher_breakdown(model: TeacherModel, g: MultiplexGraph, idx) -> TeacherBreakdown:
    """Accuracy of each view teacher, the integrated teacher and the any-correct oracle."""
    out = teacher_forward(model, g)
    preds = [z.argmax(axis=1) for z in out.all_logits]
    accs = [accuracy(p, g.y, idx) for p in preds]
    return TeacherBreakdown(tuple(accs[:-1]), accs[-1], ideal_ensemble_accuracy(preds, g.y, idx))


# ---------------------------------------------------------------------------
# production protocol


@dataclass(frozen=True)
class EvalRow:
    method: str
    seed: int
    tran_acc: float
    ind_acc: float
    ind_weight: float
    prod_acc: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def summary(self) -> dict:
        out = {}
        for m in self.methods():
            sel = [r for r in self.rows if r.method == m]
            out[m] = {}
            for key in ("tran_acc", "ind_acc", "prod_acc"):
                vals = np.array([getattr(r, key) for r in sel], dtype=float)
                vals = vals[~np.isnan(vals)]
                out[m][key] = {
                    "mean": float(vals.mean()) if vals.size else None,
                    "std": float(vals.std()) if vals.size else None,
                }
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "seed", "tran_acc", "ind_acc", "ind_weight", "prod_acc"])
            for r in self.rows:
                w.writerow([r.method, r.seed, repr(r.tran_acc), repr(r.ind_acc), repr(r.ind_weight), repr(r.prod_acc)])

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"summary": self.summary()}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _eval_row(method: str, seed: int, pred: np.ndarray, y: np.ndarray, split: ProductionSplit, ind_weight: float) -> EvalRow:
    tran = accuracy(pred, y, split.obs)
    if split.ind.size:
        ind = accuracy(pred, y, split.ind)
        w = ind_weight
    else:
        ind, w = float("nan"), 0.0
    prod = tran if w == 0.0 else prod_interpolate(ind, tran, w)
    return EvalRow(method, seed, tran, ind, w, prod)


def production_scope(n: int, split: ProductionSplit) -> np.ndarray:
    """Nodes whose soft labels may be used: everything except the inductive set."""
    keep = np.ones(n, dtype=bool)
    keep[split.ind] = False
    return np.flatnonzero(keep)


def run_production_eval(
    g: MultiplexGraph,
    split: ProductionSplit,
    teacher_cfg: TeacherConfig,
    student_cfgs: Mapping[str, DistillConfig] | DistillConfig,
    seeds: Sequence[int],
    ind_weight: float = PROD_IND_WEIGHT,
    on_seed: Callable[[int, TeacherModel, dict], None] | None = None,
) -> EvalReport:
    """Train and score teacher and students under the transductive+inductive protocol.

    Training and distillation see a graph with every obs/labeled-to-ind edge
    removed; the teacher is scored on the full graph, students on features.
    """
    if isinstance(student_cfgs, DistillConfig):
        student_cfgs = {student_cfgs.mode: student_cfgs}
    if not seeds:
        raise ValueError("at least one seed is required")
    train_graph = remove_cross_edges(g, split.ind)
    if count_cross_edges(train_graph, split.ind) != 0:
        raise AssertionError("training graph still links inductive nodes to the rest")
    scope = production_scope(g.n, split)
    report = EvalReport()
    for seed in seeds:
        teacher, _ = train_teacher(train_graph, split.base, replace(teacher_cfg, seed=seed))
        pred = teacher_forward(teacher, g).integrated.argmax(axis=1)
        report.rows.append(_eval_row("teacher", seed, pred, g.y, split, ind_weight))
        bundle = export_soft_labels(teacher, train_graph, scope)
        students = {}
        for name, cfg in student_cfgs.items():
            student, _ = train_student(g.x, g.y, split.base, bundle, replace(cfg, seed=seed))
            pred = student_predict(student.mlp, g.x).argmax(axis=1)
            report.rows.append(_eval_row(name, seed, pred, g.y, split, ind_weight))
            students[name] = student
        if on_seed is not None:
            on_seed(seed, teacher, students)
    return report


# ---------------------------------------------------------------------------
# inference benchmark


def teacher_infer(model: TeacherModel, g: MultiplexGraph, targets) -> tuple[np.ndarray, int]:
    """Integrated logits for ``targets`` computed on their L-hop fetched subgraph.

    The subgraph carries parent-graph degrees, which keeps GCN normalisation exact.
    """
    targets = np.asarray(targets, dtype=np.int64)
    nodes = fetched_nodes(g, targets, model.layers)
    out = teacher_forward(model, g.subgraph(nodes, keep_degrees=True)).integrated
    return out[np.searchsorted(nodes, targets)], int(nodes.shape[0])


def _sampled_blocks(g: MultiplexGraph, targets: np.ndarray, layers: int, fanout: int, rng: np.random.Generator):
    """Per-view sampled neighbour lists for every node within ``layers - 1`` hops."""
    sampled = [dict() for _ in g.views]
    seen = set(targets.tolist())
    frontier = list(dict.fromkeys(targets.tolist()))
    for _ in range(layers):
        nxt = []
        for v in frontier:
            for i, view in enumerate(g.views):
                neigh = view.neighbors(v)
                if neigh.shape[0] > fanout:
                    neigh = np.sort(rng.choice(neigh, size=fanout, replace=False))
                sampled[i][v] = neigh
                for u in neigh.tolist():
                    if u not in seen:
                        seen.add(u)
                        nxt.append(u)
        frontier = nxt
    return sampled, np.array(sorted(seen), dtype=np.int64)


def sampled_teacher_infer(
    model: TeacherModel, g: MultiplexGraph, targets, fanout: int, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Teacher logits for ``targets`` with at most ``fanout`` sampled neighbours per view per hop.

    The sampled blocks are directed (a node aggregates only its own sample),
    so SAGE averages over the sample; GCN normalises with sampled degrees.
    """
    targets = np.asarray(targets, dtype=np.int64)
    sampled, nodes = _sampled_blocks(g, targets, model.layers, fanout, rng)
    local = {v: i for i, v in enumerate(nodes.tolist())}
    views = []
    for per_view in sampled:
        lens = np.zeros(nodes.shape[0], dtype=np.int64)
        cols = [None] * nodes.shape[0]
        for v, neigh in per_view.items():
            li = local[v]
            lens[li] = neigh.shape[0]
            cols[li] = neigh
        indptr = np.zeros(nodes.shape[0] + 1, dtype=np.int64)
        np.cumsum(lens, out=indptr[1:])
        flat = [local[u] for li in range(nodes.shape[0]) if cols[li] is not None for u in cols[li].tolist()]
        views.append(CSRView(indptr, np.asarray(flat, dtype=np.int64)))
    sub = MultiplexGraph(tuple(views), g.x[nodes], g.y[nodes], g.k, g.view_names)
    out = teacher_forward(model, sub).integrated
    return out[np.searchsorted(nodes, targets)], int(nodes.shape[0])


def student_infer(mlp: MlpParams, x: np.ndarray, targets) -> tuple[np.ndarray, int]:
    targets = np.asarray(targets, dtype=np.int64)
    return student_predict(mlp, x[targets]), int(np.unique(targets).shape[0])


@dataclass(frozen=True)
class BenchEntry:
    method: str
    fetched_nodes: int
    median_ms: float
    p25_ms: float
    p75_ms: float
    repeats: int
    speedup_vs_teacher: float


@dataclass
class BenchReport:
    targets: list[int]
    entries: list[BenchEntry]
    backend: str = ""
    threads: int = 1

    def entry(self, method: str) -> BenchEntry:
        for e in self.entries:
            if e.method == method:
                return e
        raise KeyError(method)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "fetched_nodes", "median_ms", "p25_ms", "p75_ms", "repeats", "speedup_vs_teacher"])
            for e in self.entries:
                w.writerow([e.method, e.fetched_nodes, f"{e.median_ms:.6f}", f"{e.p25_ms:.6f}", f"{e.p75_ms:.6f}",
                            e.repeats, f"{e.speedup_vs_teacher:.4f}"])

    def write_json(self, path) -> None:
        doc = {
            "targets": self.targets, "backend": self.backend, "threads": self.threads,
            "methods": {e.method: {"fetched_nodes": e.fetched_nodes, "median_ms": e.median_ms,
                                   "p25_ms": e.p25_ms, "p75_ms": e.p75_ms, "repeats": e.repeats,
                                   "speedup_vs_teacher": e.speedup_vs_teacher} for e in self.entries},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _time(fn: Callable[[], object], repeats: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def bench_threads() -> int:
    return max(1, int(os.environ.get("MGFD_THREADS", "1")))


def bench_inference(
    g: MultiplexGraph,
    teacher: TeacherModel,
    student: StudentModel | MlpParams,
    targets=None,
    n_targets: int = 10,
    fanout: int | None = 10,
    repeats: int = 20,
    warmup: int = 3,
    seed: int = 0,
) -> BenchReport:
    """Median wall time of full-teacher, NS-``fanout`` teacher and student inference on ``targets``."""
    from threadpoolctl import threadpool_limits

    from mgfd import kernels

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    mlp = student.mlp if isinstance(student, StudentModel) else student
    rng = np.random.default_rng(seed)
    if targets is None:
        targets = np.sort(rng.choice(g.n, size=min(n_targets, g.n), replace=False))
    targets = np.asarray(targets, dtype=np.int64)

    methods: list[tuple[str, Callable[[np.random.Generator], tuple[np.ndarray, int]]]] = [
        ("teacher", lambda _r: teacher_infer(teacher, g, targets)),
    ]
    if fanout is not None:
        methods.append((f"ns-{fanout}", lambda r: sampled_teacher_infer(teacher, g, targets, fanout, r)))
    methods.append(("student", lambda _r: student_infer(mlp, g.x, targets)))

    threads = bench_threads()
    timings = {}
    with threadpool_limits(limits=threads):
        for name, fn in methods:
            fetched = fn(np.random.default_rng(seed))[1]
            r = np.random.default_rng(seed)
            times = _time(lambda: fn(r), repeats, warmup)
            timings[name] = (fetched, times)

    teacher_median = statistics.median(timings["teacher"][1])
    entries = []
    for name, (fetched, times) in timings.items():
        q = np.percentile(times, [25, 50, 75])
        med = statistics.median(times)
        entries.append(BenchEntry(name, fetched, med, float(q[0]), float(q[2]), len(times), teacher_median / med))
    return BenchReport(targets.tolist(), entries, kernels.BACKEND, threads)
