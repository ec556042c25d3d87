"""Multiplex GNN teachers: per-view SAGE/GCN stacks, integration, training, soft labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mgfd import checkpoint, kernels
from mgfd.mgraph import CSRView, MultiplexGraph, SplitSpec
from mgfd.numkit import (
    AdamConfig,
    DimensionError,
    ParamTensor,
    adam_step,
    cross_entropy_masked,
    one_hot,
    relu_backward,
    relu_map,
    row_softmax,
    softmax_backward,
)

log = logging.getLogger(__name__)

KINDS = ("sage", "gcn")
INTEGRATIONS = ("mean", "learned")


class TrainingError(FloatingPointError):
    """Raised when a training loss stops being finite."""


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class GnnLayerParams:
    kind: str
    w_neigh: ParamTensor
    bias: ParamTensor
    w_self: ParamTensor | None = None

    @classmethod
    def init(cls, kind: str, d_in: int, d_out: int, rng: np.random.Generator) -> "GnnLayerParams":
        if kind not in KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        w_self = ParamTensor(glorot(rng, d_in, d_out)) if kind == "sage" else None
        return cls(kind, ParamTensor(glorot(rng, d_in, d_out)), ParamTensor(np.zeros((1, d_out))), w_self)

    @property
    def d_in(self) -> int:
        return self.w_neigh.shape[0]

    def named(self, prefix: str) -> dict[str, ParamTensor]:
        out = {f"{prefix}.w_neigh": self.w_neigh, f"{prefix}.bias": self.bias}
        if self.w_self is not None:
            out[f"{prefix}.w_self"] = self.w_self
        return out


def _aggregate(kind: str, view: CSRView, h: np.ndarray) -> np.ndarray:
    if kind == "sage":
        return kernels.spmm(view.indptr, view.indices, view.mean_weights, h)
    w, self_w = view.gcn_norm
    return kernels.spmm(view.indptr, view.indices, w, h) + self_w[:, None] * h


def _aggregate_t(kind: str, view: CSRView, g: np.ndarray) -> np.ndarray:
    if kind == "sage":
        return kernels.spmm(view.indptr, view.indices, view.mean_weights_t, g)
    # normalised A+I is symmetric
    return _aggregate(kind, view, g)


def _check_input(view: CSRView, h: np.ndarray, params: GnnLayerParams) -> None:
    if h.ndim != 2 or h.shape[0] != view.n or h.shape[1] != params.d_in:
        raise DimensionError(f"layer expects ({view.n}, {params.d_in}) input, got {h.shape}")


def sage_layer_forward(view: CSRView, h: np.ndarray, params: GnnLayerParams) -> np.ndarray:
    """``h W_self + mean_{u in N(v)} h_u W_neigh + b``; isolated nodes get a zero neighbour term."""
    _check_input(view, h, params)
    neigh = _aggregate("sage", view, h)
    return h @ params.w_self.value + neigh @ params.w_neigh.value + params.bias.value


def gcn_layer_forward(view: CSRView, h: np.ndarray, params: GnnLayerParams) -> np.ndarray:
    """``Â h W + b`` with Â the symmetrically normalised adjacency plus self-loops."""
    _check_input(view, h, params)
    return _aggregate("gcn", view, h) @ params.w_neigh.value + params.bias.value


def layer_forward(view: CSRView, h: np.ndarray, params: GnnLayerParams) -> tuple[np.ndarray, np.ndarray]:
    """Layer output plus the aggregated input (kept for the backward pass)."""
    _check_input(view, h, params)
    agg = _aggregate(params.kind, view, h)
    out = agg @ params.w_neigh.value + params.bias.value
    if params.w_self is not None:
        out = out + h @ params.w_self.value
    return out, agg


def layer_backward(view: CSRView, h: np.ndarray, agg: np.ndarray, params: GnnLayerParams, dout: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients; return the gradient w.r.t. the layer input."""
    params.w_neigh.accumulate(agg.T @ dout)
    params.bias.accumulate(dout.sum(axis=0, keepdims=True))
    dh = _aggregate_t(params.kind, view, dout @ params.w_neigh.value.T)
    if params.w_self is not None:
        params.w_self.accumulate(h.T @ dout)
        dh = dh + dout @ params.w_self.value.T
    return dh


@dataclass
class TeacherConfig:
    kind: str = "sage"
    integration: str = "mean"
    layers: int = 2
    hidden: int = 128
    epochs: int = 200
    dropout: float = 0.0
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"teacher kind must be one of {KINDS}")
        if self.integration not in INTEGRATIONS:
            raise ValueError(f"integration must be one of {INTEGRATIONS}")
        if self.layers < 1 or self.hidden < 1 or self.epochs < 0:
            raise ValueError("layers and hidden must be >= 1, epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TeacherModel:
    kind: str
    integration: str
    stacks: list[list[GnnLayerParams]]
    classifier: ParamTensor
    att_logits: ParamTensor
    dropout: float = 0.0

    @classmethod
    def init(cls, in_dim: int, k: int, r: int, cfg: TeacherConfig, rng: np.random.Generator) -> "TeacherModel":
        stacks = []
        for _ in range(r):
            dims = [in_dim] + [cfg.hidden] * cfg.layers
            stacks.append([GnnLayerParams.init(cfg.kind, dims[i], dims[i + 1], rng) for i in range(cfg.layers)])
        classifier = ParamTensor(glorot(rng, cfg.hidden, k))
        return cls(cfg.kind, cfg.integration, stacks, classifier, ParamTensor(np.zeros((1, r))), cfg.dropout)

    @property
    def r(self) -> int:
        return len(self.stacks)

    @property
    def layers(self) -> int:
        return len(self.stacks[0])

    @property
    def in_dim(self) -> int:
        return self.stacks[0][0].d_in

    @property
    def hidden(self) -> int:
        return self.classifier.shape[0]

    @property
    def k(self) -> int:
        return self.classifier.shape[1]

    def alpha(self) -> np.ndarray:
        if self.integration == "mean":
            return np.full(self.r, 1.0 / self.r)
        return row_softmax(self.att_logits.value)[0]

    def named_params(self) -> dict[str, ParamTensor]:
        out: dict[str, ParamTensor] = {}
        for i, stack in enumerate(self.stacks):
            for l, layer in enumerate(stack):
                out.update(layer.named(f"view{i}.layer{l}"))
        out["classifier"] = self.classifier
        if self.integration == "learned":
            out["att_logits"] = self.att_logits
        return out

    def parameters(self) -> list[ParamTensor]:
        return list(self.named_params().values())

    def arch(self) -> dict:
        return {
            "model": "teacher", "kind": self.kind, "integration": self.integration, "r": self.r,
            "layers": self.layers, "hidden": self.hidden, "in_dim": self.in_dim, "k": self.k,
            "dropout": self.dropout,
        }

    def to_dict(self) -> dict:
        return checkpoint.encode(self.arch(), {n: p.value for n, p in self.named_params().items()})

    @classmethod
    def from_dict(cls, doc: dict) -> "TeacherModel":
        a = doc["arch"]
        if a.get("model") != "teacher":
            raise checkpoint.CheckpointError("not a teacher checkpoint")
        cfg = TeacherConfig(kind=a["kind"], integration=a["integration"], layers=a["layers"], hidden=a["hidden"])
        model = cls.init(a["in_dim"], a["k"], a["r"], cfg, np.random.default_rng(0))
        model.dropout = float(a.get("dropout", 0.0))
        named = model.named_params()
        values = checkpoint.decode(doc, {n: p.shape for n, p in named.items()})
        for n, p in named.items():
            p.value[...] = values[n]
        return model


@dataclass
class TeacherOutput:
    view_logits: list[np.ndarray]
    integrated: np.ndarray
    alpha: np.ndarray

    @property
    def all_logits(self) -> list[np.ndarray]:
        return [*self.view_logits, self.integrated]

    @property
    def probs(self) -> list[np.ndarray]:
        """r+1 probability matrices; the last one belongs to the integrated teacher."""
        return [row_softmax(z) for z in self.all_logits]


def _forward(model: TeacherModel, g: MultiplexGraph, rng: np.random.Generator | None = None):
    if g.r != model.r:
        raise DimensionError(f"model has {model.r} views, graph has {g.r}")
    if g.d != model.in_dim:
        raise DimensionError(f"model expects {model.in_dim} features, graph has {g.d}")
    alpha = model.alpha()
    caches, view_logits, embeds = [], [], []
    for view, stack in zip(g.views, model.stacks):
        h = g.x
        cache = []
        for l, layer in enumerate(stack):
            out, agg = layer_forward(view, h, layer)
            entry = {"h": h, "agg": agg, "pre": out, "mask": None}
            if l < len(stack) - 1:
                h = relu_map(out)
                if rng is not None and model.dropout > 0.0:
                    keep = rng.random(h.shape) >= model.dropout
                    entry["mask"] = keep / (1.0 - model.dropout)
                    h = h * entry["mask"]
            else:
                h = out
            cache.append(entry)
        caches.append(cache)
        embeds.append(h)
        view_logits.append(h @ model.classifier.value)
    integrated = sum(a * z for a, z in zip(alpha, view_logits))
    return TeacherOutput(view_logits, integrated, alpha), (caches, embeds)


def _backward(model: TeacherModel, g: MultiplexGraph, out: TeacherOutput, state, d_integrated: np.ndarray) -> None:
    caches, embeds = state
    d_alpha = np.array([float((d_integrated * z).sum()) for z in out.view_logits])
    for i, (view, stack) in enumerate(zip(g.views, model.stacks)):
        dz = out.alpha[i] * d_integrated
        model.classifier.accumulate(embeds[i].T @ dz)
        dh = dz @ model.classifier.value.T
        for l in range(len(stack) - 1, -1, -1):
            entry = caches[i][l]
            if l < len(stack) - 1:
                if entry["mask"] is not None:
                    dh = dh * entry["mask"]
                dh = relu_backward(entry["pre"], dh)
            dh = layer_backward(view, entry["h"], entry["agg"], stack[l], dh)
    if model.integration == "learned":
        model.att_logits.accumulate(softmax_backward(out.alpha[None, :], d_alpha[None, :]))


def teacher_forward(model: TeacherModel, g: MultiplexGraph) -> TeacherOutput:
    """Per-view logits, integrated logits ``sum_i alpha_i Z^i`` and the weights alpha."""
    return _forward(model, g)[0]


def teacher_loss_and_grads(model: TeacherModel, g: MultiplexGraph, labels_onehot: np.ndarray, train_idx) -> float:
    """Cross-entropy of the integrated logits on ``train_idx``; fills parameter grads."""
    for p in model.parameters():
        p.zero_grad()
    out, state = _forward(model, g)
    loss, dz = cross_entropy_masked(out.integrated, labels_onehot, train_idx)
    _backward(model, g, out, state, dz)
    return loss


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float


def _acc(logits: np.ndarray, y: np.ndarray, idx: np.ndarray) -> float:
    return float(np.mean(logits[idx].argmax(axis=1) == y[idx]))


def train_teacher(g: MultiplexGraph, splits: SplitSpec, cfg: TeacherConfig) -> tuple[TeacherModel, list[EpochRecord]]:
    """Full-batch Adam on the integrated cross-entropy; keeps the best-validation parameters."""
    if splits.train.size == 0 or splits.val.size == 0:
        raise ValueError("train_teacher needs non-empty train and val sets")
    rng = np.random.default_rng(cfg.seed)
    model = TeacherModel.init(g.d, g.k, g.r, cfg, rng)
    y1h = one_hot(g.y, g.k)
    params = model.parameters()
    best_acc, best = -1.0, None
    history: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        for p in params:
            p.zero_grad()
        out, state = _forward(model, g, rng)
        loss, dz = cross_entropy_masked(out.integrated, y1h, splits.train)
        if not np.isfinite(loss):
            raise TrainingError(f"teacher loss became {loss} at epoch {epoch}")
        _backward(model, g, out, state, dz)
        adam_step(params, cfg.adam)
        val_acc = _acc(teacher_forward(model, g).integrated, g.y, splits.val)
        history.append(EpochRecord(epoch, loss, val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best = [p.value.copy() for p in params]
    if best is not None:
        for p, v in zip(params, best):
            p.value[...] = v
    if history:
        log.info("teacher: %d epochs, best val acc %.4f", len(history), best_acc)
    return model, history


@dataclass
class SoftLabelBundle:
    """Teacher probabilities on ``scope``: r per-view matrices, then the integrated one."""

    scope: np.ndarray
    probs: list[np.ndarray]

    def __post_init__(self):
        self.scope = np.asarray(self.scope, dtype=np.int64)
        for p in self.probs:
            if p.shape[0] != self.scope.shape[0]:
                raise DimensionError(f"probability rows {p.shape[0]} != scope size {self.scope.shape[0]}")
            if p.size and np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-8:
                raise ValueError("soft labels must be probability rows")

    @property
    def n_teachers(self) -> int:
        return len(self.probs)

    @property
    def whole(self) -> np.ndarray:
        return self.probs[-1]

    def __len__(self) -> int:
        return int(self.scope.shape[0])


def export_soft_labels(model: TeacherModel, g: MultiplexGraph, scope) -> SoftLabelBundle:
    """Run the teacher on ``g`` (the training-time graph) and keep rows in ``scope``."""
    scope = np.asarray(scope, dtype=np.int64).reshape(-1)
    out = teacher_forward(model, g)
    return SoftLabelBundle(scope, [p[scope] for p in out.probs])


def write_log_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_acc\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.train_loss!r},{rec.val_acc!r}\n")
