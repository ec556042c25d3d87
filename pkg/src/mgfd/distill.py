"""Student MLPs distilled from multiplex teachers.

Modes:

* ``mgfnn``: cross-entropy on labeled nodes plus KL to the integrated teacher.
* ``mgfnn-plus``: node-wise weighted KL to all r+1 teachers, with weights
  ``C = softmax(tanh(H W) T)`` computed from the student's last hidden layer,
  minus a mean-entropy bonus on the average weights.
* ``mean`` / ``para``: one weight vector shared by every node, either uniform
  or a learned softmax.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mgfd import checkpoint
from mgfd.mgraph import SplitSpec
from mgfd.numkit import (
    SIMPLEX_TOL,
    AdamConfig,
    DimensionError,
    ParamTensor,
    adam_step,
    cross_entropy_masked,
    entropy_of_mean,
    kl_divergence_rows,
    kl_rows,
    one_hot,
    relu_backward,
    relu_map,
    row_softmax,
    softmax_backward,
    tanh_backward,
    tanh_map,
)
from mgfd.teacher import EpochRecord, SoftLabelBundle, TrainingError, glorot

log = logging.getLogger(__name__)

MODES = ("mgfnn", "mgfnn-plus", "mean", "para")


@dataclass
class MlpParams:
    layers: list[tuple[ParamTensor, ParamTensor]]

    @classmethod
    def init(cls, in_dim: int, hidden: int, k: int, n_layers: int, rng: np.random.Generator) -> "MlpParams":
        if n_layers < 1:
            raise ValueError("an MLP needs at least one layer")
        dims = [in_dim] + [hidden] * (n_layers - 1) + [k]
        return cls([(ParamTensor(glorot(rng, a, b)), ParamTensor(np.zeros((1, b)))) for a, b in zip(dims[:-1], dims[1:])])

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def k(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def hidden_dim(self) -> int:
        """Width of ``H``; equals the input width for a single-layer MLP."""
        return self.layers[-1][0].shape[0]

    def named_params(self) -> dict[str, ParamTensor]:
        out = {}
        for l, (w, b) in enumerate(self.layers):
            out[f"layer{l}.weight"] = w
            out[f"layer{l}.bias"] = b
        return out


def _mlp_forward(params: MlpParams, x: np.ndarray, rng=None, dropout: float = 0.0):
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(f"MLP expects {params.in_dim} input columns, got shape {x.shape}")
    cache = []
    h = x
    last = len(params.layers) - 1
    for l, (w, b) in enumerate(params.layers):
        pre = h @ w.value + b.value
        mask = None
        if l < last and rng is not None and dropout > 0.0:
            mask = (rng.random(pre.shape) >= dropout) / (1.0 - dropout)
        cache.append((h, pre, mask))
        if l < last:
            h = relu_map(pre) if mask is None else relu_map(pre) * mask
    return cache[-1][0], cache[-1][1], cache


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(H, logits)``; ``H`` is the input of the output layer (``x`` itself when L = 1)."""
    h, logits, _ = _mlp_forward(params, x)
    return h, logits


def mlp_backward(params: MlpParams, cache, d_logits: np.ndarray, d_hidden: np.ndarray | None = None) -> None:
    """Accumulate gradients; ``d_hidden`` is extra gradient arriving at ``H``."""
    dpre = d_logits
    for l in range(len(params.layers) - 1, -1, -1):
        w, b = params.layers[l]
        h_in = cache[l][0]
        w.accumulate(h_in.T @ dpre)
        b.accumulate(dpre.sum(axis=0, keepdims=True))
        if l == 0:
            break
        dh = dpre @ w.value.T
        if l == len(params.layers) - 1 and d_hidden is not None:
            dh = dh + d_hidden
        _, pre_prev, mask = cache[l - 1]
        if mask is not None:
            dh = dh * mask
        dpre = relu_backward(pre_prev, dh)


@dataclass
class CoeffFactors:
    w: ParamTensor  # h x m
    t: ParamTensor  # m x (r+1)

    @classmethod
    def init(cls, hidden: int, rank: int, n_teachers: int, rng: np.random.Generator, scale: float = 0.01) -> "CoeffFactors":
        if rank < 1:
            raise ValueError("rank must be >= 1")
        return cls(
            ParamTensor(rng.uniform(-scale, scale, size=(hidden, rank))),
            ParamTensor(rng.uniform(-scale, scale, size=(rank, n_teachers))),
        )

    @property
    def rank(self) -> int:
        return self.w.shape[1]

    @property
    def n_teachers(self) -> int:
        return self.t.shape[1]


def _coeff_forward(h: np.ndarray, w: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if h.ndim != 2 or h.shape[1] != w.shape[0]:
        raise DimensionError(f"H {h.shape} does not match W {w.shape}")
    s = tanh_map(h @ w)
    return row_softmax(s @ t), s


def coefficients(h: np.ndarray, factors: CoeffFactors) -> np.ndarray:
    """Node-wise ensemble weights ``softmax(tanh(H W) T)``, one simplex row per node."""
    return _coeff_forward(h, factors.w.value, factors.t.value)[0]


def _coeff_backward(h, w, t, s, c, dc) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    du = softmax_backward(c, dc)
    dt = s.T @ du
    dpre = tanh_backward(s, du @ t.T)
    return dpre @ w.T, h.T @ dpre, dt


# ---------------------------------------------------------------------------
# losses; each returns (value, grads)


def _check_scope(bundle: SoftLabelBundle, n: int) -> None:
    if len(bundle) and (bundle.scope.min() < 0 or bundle.scope.max() >= n):
        raise IndexError(f"soft-label scope refers to rows outside [0, {n})")


def _ce_part(logits, labels, labeled_idx, lam):
    idx = np.asarray(labeled_idx, dtype=np.int64)
    if lam > 0.0:
        if idx.size == 0:
            raise ValueError("labeled set is empty but lambda > 0")
        return cross_entropy_masked(logits, one_hot(labels, logits.shape[1]), idx)
    return 0.0, np.zeros_like(logits)


def mgfnn_loss(logits, labels, labeled_idx, bundle: SoftLabelBundle, lam: float) -> tuple[float, dict]:
    """``lam * CE(labeled) + (1 - lam) * mean KL(whole teacher || student)`` over the bundle scope."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    _check_scope(bundle, logits.shape[0])
    ce, g = _ce_part(logits, labels, labeled_idx, lam)
    total = lam * ce
    grad = lam * g
    if lam < 1.0 and len(bundle):
        s = bundle.scope
        kl, gk = kl_divergence_rows(bundle.whole, logits[s], np.full(len(bundle), 1.0 / len(bundle)))
        total += (1.0 - lam) * kl
        np.add.at(grad, s, (1.0 - lam) * gk)
    return float(total), {"logits": grad}


def _kl_matrix(bundle: SoftLabelBundle, logits_scope: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(|scope| x (r+1))`` per-node per-teacher KL values and the student softmax."""
    cols, q = [], None
    for p in bundle.probs:
        kl, q = kl_rows(p, logits_scope)
        cols.append(kl)
    return np.stack(cols, axis=1), q


def _weighted_kl_grad(bundle: SoftLabelBundle, q: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_v sum_i w_vi KL(z_v^i || q_v)`` w.r.t. student logits."""
    grad = np.zeros_like(q)
    for i, p in enumerate(bundle.probs):
        grad += weights[:, i:i + 1] * (q * p.sum(axis=1, keepdims=True) - p)
    return grad


def viewwise_loss(logits, bundle: SoftLabelBundle, c) -> tuple[float, dict]:
    """``sum_i c_i * mean KL(z^i || student)``; the same weights for every node."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if c.shape[0] != bundle.n_teachers:
        raise DimensionError(f"{c.shape[0]} weights for {bundle.n_teachers} teachers")
    if np.any(c < -SIMPLEX_TOL) or abs(c.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("view weights must lie on the probability simplex")
    _check_scope(bundle, logits.shape[0])
    grad = np.zeros_like(logits)
    if not len(bundle):
        return 0.0, {"logits": grad, "c": np.zeros_like(c)}
    s = bundle.scope
    klm, q = _kl_matrix(bundle, logits[s])
    mean_kl = klm.mean(axis=0)
    weights = np.broadcast_to(c / len(bundle), klm.shape)
    np.add.at(grad, s, _weighted_kl_grad(bundle, q, weights))
    return float(c @ mean_kl), {"logits": grad, "c": mean_kl}


def mgfnn_plus_loss(
    logits, h, factors: CoeffFactors, bundle: SoftLabelBundle, lam: float, gamma: float, labels, labeled_idx
) -> tuple[float, dict]:
    """``lam CE + (1 - lam) (mean_v sum_i c_vi KL(z_v^i || y_v) - gamma H(mean c))``.

    Gradients are returned for the logits, the hidden representation ``H``
    and both factors, since ``C`` is a function of ``H``, ``W`` and ``T``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    if bundle.n_teachers != factors.n_teachers:
        raise DimensionError(f"factors cover {factors.n_teachers} teachers, bundle has {bundle.n_teachers}")
    if h.shape[0] != logits.shape[0]:
        raise DimensionError(f"H has {h.shape[0]} rows, logits {logits.shape[0]}")
    _check_scope(bundle, logits.shape[0])
    ce, g = _ce_part(logits, labels, labeled_idx, lam)
    grads = {
        "logits": lam * g,
        "H": np.zeros_like(h),
        "W": np.zeros_like(factors.w.value),
        "T": np.zeros_like(factors.t.value),
    }
    total = lam * ce
    if lam < 1.0 and len(bundle):
        s = bundle.scope
        ns = len(bundle)
        w, t = factors.w.value, factors.t.value
        c, smat = _coeff_forward(h[s], w, t)
        klm, q = _kl_matrix(bundle, logits[s])
        kl_term = float((c * klm).sum()) / ns
        ent, dent = entropy_of_mean(c)
        total += (1.0 - lam) * (kl_term - gamma * ent)
        np.add.at(grads["logits"], s, (1.0 - lam) * _weighted_kl_grad(bundle, q, c / ns))
        dc = (1.0 - lam) * (klm / ns - gamma * dent)
        dh, dw, dt = _coeff_backward(h[s], w, t, smat, c, dc)
        np.add.at(grads["H"], s, dh)
        grads["W"] = dw
        grads["T"] = dt
    return float(total), grads


# ---------------------------------------------------------------------------
# training


@dataclass
class DistillConfig:
    mode: str = "mgfnn"
    lam: float = 0.0
    gamma: float = 0.01
    rank: int = 2
    epochs: int = 200
    hidden: int = 128
    layers: int = 2
    dropout: float = 0.0
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if self.rank < 1 or self.epochs < 0 or self.layers < 1 or self.hidden < 1:
            raise ValueError("rank, layers, hidden must be >= 1 and epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class StudentModel:
    mode: str
    mlp: MlpParams
    factors: CoeffFactors | None = None
    view_logits: ParamTensor | None = None  # learnable weights of the ``para`` mode

    def parameters(self) -> list[ParamTensor]:
        return list(self.named_params().values())

    def named_params(self) -> dict[str, ParamTensor]:
        out = dict(self.mlp.named_params())
        if self.factors is not None:
            out["coef.W"] = self.factors.w
            out["coef.T"] = self.factors.t
        if self.view_logits is not None:
            out["para.logits"] = self.view_logits
        return out

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return student_predict(self.mlp, x)

    def coefficients(self, x: np.ndarray) -> np.ndarray:
        if self.factors is None:
            raise ValueError(f"a {self.mode} student has no node-wise coefficients")
        h, _ = mlp_forward(self.mlp, x)
        return coefficients(h, self.factors)

    def arch(self) -> dict:
        return {
            "model": "student", "mode": self.mode, "layers": len(self.mlp.layers),
            "hidden": self.mlp.layers[0][0].shape[1] if len(self.mlp.layers) > 1 else 0,
            "in_dim": self.mlp.in_dim, "k": self.mlp.k,
            "rank": self.factors.rank if self.factors is not None else 0,
            "n_teachers": (self.factors.n_teachers if self.factors is not None
                           else self.view_logits.shape[1] if self.view_logits is not None else 0),
        }

    def to_dict(self) -> dict:
        return checkpoint.encode(self.arch(), {n: p.value for n, p in self.named_params().items()})

    @classmethod
    def from_dict(cls, doc: dict) -> "StudentModel":
        a = doc["arch"]
        if a.get("model") != "student":
            raise checkpoint.CheckpointError("not a student checkpoint")
        rng = np.random.default_rng(0)
        model = cls(a["mode"], MlpParams.init(a["in_dim"], max(a["hidden"], 1), a["k"], a["layers"], rng))
        if a["mode"] == "mgfnn-plus":
            model.factors = CoeffFactors.init(model.mlp.hidden_dim, a["rank"], a["n_teachers"], rng)
        elif a["mode"] == "para":
            model.view_logits = ParamTensor(np.zeros((1, a["n_teachers"])))
        named = model.named_params()
        values = checkpoint.decode(doc, {n: p.shape for n, p in named.items()})
        for n, p in named.items():
            p.value[...] = values[n]
        return model


def student_predict(mlp: MlpParams, x: np.ndarray) -> np.ndarray:
    """Graph-free inference: the only inputs are the MLP parameters and node features."""
    return mlp_forward(mlp, x)[1]


def _student_loss(model: StudentModel, cfg: DistillConfig, h, logits, labels, train_idx, bundle):
    if cfg.mode == "mgfnn":
        return mgfnn_loss(logits, labels, train_idx, bundle, cfg.lam)
    if cfg.mode == "mgfnn-plus":
        return mgfnn_plus_loss(logits, h, model.factors, bundle, cfg.lam, cfg.gamma, labels, train_idx)
    if cfg.mode == "mean":
        c = np.full(bundle.n_teachers, 1.0 / bundle.n_teachers)
    else:
        c = row_softmax(model.view_logits.value)[0]
    ce, g = _ce_part(logits, labels, train_idx, cfg.lam)
    kl, gk = viewwise_loss(logits, bundle, c)
    grads = {"logits": cfg.lam * g + (1.0 - cfg.lam) * gk["logits"]}
    if cfg.mode == "para":
        grads["view_logits"] = softmax_backward(c[None, :], (1.0 - cfg.lam) * gk["c"][None, :])
    return cfg.lam * ce + (1.0 - cfg.lam) * kl, grads


def init_student(in_dim: int, k: int, n_teachers: int, cfg: DistillConfig, rng: np.random.Generator) -> StudentModel:
    mlp = MlpParams.init(in_dim, cfg.hidden, k, cfg.layers, rng)
    model = StudentModel(cfg.mode, mlp)
    if cfg.mode == "mgfnn-plus":
        model.factors = CoeffFactors.init(mlp.hidden_dim, cfg.rank, n_teachers, rng)
    elif cfg.mode == "para":
        model.view_logits = ParamTensor(np.zeros((1, n_teachers)))
    return model


def train_student(
    x: np.ndarray, labels, splits: SplitSpec, bundle: SoftLabelBundle, cfg: DistillConfig
) -> tuple[StudentModel, list[EpochRecord]]:
    """Fit a student on node features only; keeps the best-validation parameters.

    ``labels`` is consulted only on ``splits.train`` (loss) and ``splits.val``
    (model selection).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} feature rows")
    _check_scope(bundle, n)
    rng = np.random.default_rng(cfg.seed)
    k = bundle.probs[0].shape[1] if bundle.n_teachers else int(labels.max()) + 1
    model = init_student(x.shape[1], k, bundle.n_teachers, cfg, rng)
    params = model.parameters()
    best_acc, best = -1.0, None
    history: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        for p in params:
            p.zero_grad()
        h, logits, cache = _mlp_forward(model.mlp, x, rng, cfg.dropout)
        loss, grads = _student_loss(model, cfg, h, logits, labels, splits.train, bundle)
        if not np.isfinite(loss):
            raise TrainingError(f"student loss became {loss} at epoch {epoch}")
        mlp_backward(model.mlp, cache, grads["logits"], grads.get("H") if len(model.mlp.layers) > 1 else None)
        if model.factors is not None:
            model.factors.w.accumulate(grads["W"])
            model.factors.t.accumulate(grads["T"])
        if model.view_logits is not None:
            model.view_logits.accumulate(grads["view_logits"])
        adam_step(params, cfg.adam)
        pred = student_predict(model.mlp, x[splits.val]).argmax(axis=1)
        val_acc = float(np.mean(pred == labels[splits.val]))
        history.append(EpochRecord(epoch, float(loss), val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best = [p.value.copy() for p in params]
    if best is not None:
        for p, v in zip(params, best):
            p.value[...] = v
    if history:
        log.info("student[%s]: %d epochs, best val acc %.4f", cfg.mode, len(history), best_acc)
    return model, history


def export_coefficients(h: np.ndarray, factors: CoeffFactors, node_ids) -> list[tuple]:
    """Rows ``(node, c_1, ..., c_{r+1})`` for the requested nodes."""
    ids = [int(v) for v in node_ids]
    bad = [v for v in ids if v < 0 or v >= h.shape[0]]
    if bad:
        raise IndexError(f"unknown node ids: {bad}")
    c = coefficients(h[np.asarray(ids, dtype=np.int64)], factors) if ids else np.zeros((0, factors.n_teachers))
    return [(v, *row.tolist()) for v, row in zip(ids, c)]


def write_coefficients_csv(rows: list[tuple], n_teachers: int, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node," + ",".join(f"c_{i + 1}" for i in range(n_teachers)) + "\n")
        for row in rows:
            fh.write(f"{row[0]}," + ",".join(repr(v) for v in row[1:]) + "\n")
