"""Graph classification: SGC features -> linear map W -> pooling -> flatten -> logistic regression.

Gradients are assembled by hand. The classifier part is plain softmax
regression; the cotangent on the pooled support is pushed back to the node
representations with the implicit VJP of the flow's fixed point, and from
there to ``W`` exactly, since the representations are linear in ``W``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .flow import FlowError, FlowParams, flowpool, init_reference
from .graphs import GraphDataset, LabeledGraph, one_hot_features, sgc_propagate, sortpool_order
from .implicit import ImplicitDiffError, ImplicitDiffParams, implicit_vjp
from .measures import SQEUCLIDEAN, CostSpec
from .sinkhorn import SinkhornParams

logger = logging.getLogger(__name__)

POOLINGS = ("flowpool", "sortpool")
MAX_SKIP_RATE = 0.01


class TrainingError(RuntimeError):
    """Training could not be completed (too many skipped graphs, bad folds)."""


def default_pipeline_flow(M: int = 5) -> FlowParams:
    """Flow settings used by the classifier with ``M`` support points.

    LossOnly objective, the one the implicit backward pass is derived for.
    With uniform weights its Hessian is bounded by ``2/M``, so ``tau = M/2``
    is the largest step that stays monotone in the frozen-coupling regime.
    """
    return FlowParams(tau=M / 2, max_steps=500, grad_tol=1e-6, objective="loss",
                      sinkhorn=SinkhornParams(epsilon=0.1, max_iters=2000, tol=1e-9))


@dataclass
class ModelParams:
    W: np.ndarray
    w_clf: np.ndarray
    X0: np.ndarray

    @property
    def M(self) -> int:
        return self.X0.shape[0]

    @property
    def d(self) -> int:
        return self.X0.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.W.copy(), self.w_clf.copy(), self.X0)

    def check(self):
        kinds, d = self.W.shape
        if self.X0.shape[1] != d:
            raise ValueError(f"X0 has dimension {self.X0.shape[1]}, W maps to {d}")
        if self.w_clf.shape[0] != self.X0.size + 1:
            raise ValueError(f"w_clf has {self.w_clf.shape[0]} rows, expected M*d+1 = {self.X0.size + 1}")
        for name in ("W", "w_clf", "X0"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} is not finite")


def init_model(kinds: int, num_classes: int, d: int = 8, M: int = 5, seed: int = 0,
               X0: Optional[np.ndarray] = None) -> ModelParams:
    """Glorot-uniform ``W``, zero classifier, standard-normal reference ``X0``."""
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (kinds + d))
    W = rng.uniform(-limit, limit, size=(kinds, d))
    if X0 is None:
        X0 = init_reference(M, d, seed)
    X0 = np.array(X0, dtype=np.float64)
    X0.setflags(write=False)
    return ModelParams(W, np.zeros((X0.size + 1, num_classes)), X0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.01
    max_epochs: int = 300
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    folds: int = 10
    val_fraction: float = 0.1
    d: int = 8
    M: int = 5
    sgc_k: int = 2
    pooling: str = "flowpool"
    workers: int = 1

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "folds", "d", "M", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sgc_k < 0:
            raise ValueError("sgc_k must be >= 0")
        if not (self.learning_rate > 0 and self.adam_eps > 0):
            raise ValueError("learning_rate and adam_eps must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")


@dataclass
class CvReport:
    fold_accuracies: List[float]
    mean: float
    std: float
    config: Dict
    manifest: Dict

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def git_revision(path=None) -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=path or Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def array_digest(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()


# ----------------------------------------------------------------------------- splits

def stratified_kfold(labels, k: int = 10, seed: int = 0, val_fraction: float = 0.1):
    """Stratified ``k``-fold split with a stratified inner validation holdout.

    Returns ``k`` triples ``(train, val, test)`` of sorted index arrays. Test
    folds partition the data. Members of each class are shuffled and dealt to
    the folds round-robin, continuing where the previous class stopped so fold
    sizes differ by at most one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < k):
        rare = classes[counts < k].tolist()
        raise ValueError(f"classes {rare} have fewer than k={k} members")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.size, dtype=np.int64)
    start = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = (start + np.arange(idx.size)) % k
        start = (start + idx.size) % k
    splits = []
    for fold in range(k):
        test = np.flatnonzero(fold_of == fold)
        rest = np.flatnonzero(fold_of != fold)
        val = []
        for c in classes:
            members = rng.permutation(rest[labels[rest] == c])
            n_val = max(1, int(round(val_fraction * members.size))) if members.size > 1 else 0
            val.extend(members[:n_val].tolist())
        val = np.sort(np.asarray(val, dtype=np.int64))
        train = np.setdiff1d(rest, val)
        splits.append((train, val, test))
    return splits


# ----------------------------------------------------------------------------- model

@dataclass
class ForwardCache:
    Z: np.ndarray
    Y: np.ndarray
    pooled: np.ndarray
    h: np.ndarray
    converged: bool = True
    order: Optional[np.ndarray] = None


def graph_features(g: LabeledGraph, kinds: int, K: int = 2) -> np.ndarray:
    """``S^K F`` for one-hot node labels ``F``; independent of the trainable weights."""
    return sgc_propagate(g, one_hot_features(g, kinds), K)


def forward_features(Z, params: ModelParams, flow: FlowParams, pooling: str = "flowpool",
                     spec: CostSpec = SQEUCLIDEAN) -> Tuple[np.ndarray, ForwardCache]:
    Y = Z @ params.W
    order = None
    converged = True
    if pooling == "flowpool":
        res = flowpool(Y, params.X0, flow, spec)
        pooled = res.x_star
        converged = res.converged
    elif pooling == "sortpool":
        order = sortpool_order(Y, params.M)
        pooled = np.zeros_like(params.X0)
        pooled[: order.size] = Y[order]
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    h = np.append(pooled.ravel(), 1.0)
    return h @ params.w_clf, ForwardCache(Z, Y, pooled, h, converged, order)


def forward(g: LabeledGraph, params: ModelParams, flow: FlowParams = None, kinds: int = None,
            K: int = 2, pooling: str = "flowpool", spec: CostSpec = SQEUCLIDEAN):
    """Logits for one graph plus the cache needed by :func:`backward`."""
    flow = flow or default_pipeline_flow(params.M)
    kinds = params.W.shape[0] if kinds is None else kinds
    return forward_features(graph_features(g, kinds, K), params, flow, pooling, spec)


def log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def cross_entropy(logits, label: int) -> float:
    return float(-log_softmax(logits)[label])


def _sample_grads(Z, label, params, flow, idp, pooling, spec, scale):
    """(loss, dW, dw_clf, logits) of ``scale * CE`` for one graph."""
    logits, cache = forward_features(Z, params, flow, pooling, spec)
    logp = log_softmax(logits)
    dlogits = np.exp(logp)
    dlogits[label] -= 1.0
    dlogits *= scale
    dw_clf = np.outer(cache.h, dlogits)
    dpooled = (params.w_clf[:-1] @ dlogits).reshape(params.X0.shape)
    if pooling == "flowpool":
        if not np.any(dpooled):
            dY = np.zeros_like(cache.Y)
        else:
            if not cache.converged:
                raise ImplicitDiffError("flow did not reach its fixed point")
            # the probe re-solves Sinkhorn more tightly than the flow did, hence the slack
            dY = implicit_vjp(cache.pooled, cache.Y, dpooled, spec, flow.sinkhorn, idp, flow.objective,
                              grad_tol=10 * flow.grad_tol)
    else:
        dY = np.zeros_like(cache.Y)
        n = cache.order.size
        dY[cache.order] = dpooled[:n]
    dW = cache.Z.T @ dY
    return float(-logp[label]), dW, dw_clf, logits


def _sample_job(item, params, flow, idp, pooling, spec, scale):
    index, Z, label = item
    try:
        return index, _sample_grads(Z, label, params, flow, idp, pooling, spec, scale), None
    except (FlowError, ImplicitDiffError) as exc:
        return index, None, f"graph {index}: {exc}"


@dataclass
class BatchGrads:
    loss: float
    dW: np.ndarray
    dw_clf: np.ndarray
    skipped: List[int] = field(default_factory=list)


def backward(features: Sequence[np.ndarray], labels: Sequence[int], params: ModelParams,
             flow: FlowParams = None, idp: ImplicitDiffParams = ImplicitDiffParams(),
             pooling: str = "flowpool", spec: CostSpec = SQEUCLIDEAN, indices: Sequence[int] = None,
             executor=None) -> BatchGrads:
    """Mean cross-entropy over a batch and its gradients with respect to ``W`` and ``w_clf``.

    ``features`` are the propagated node features ``S^K F`` of each graph.
    Graphs whose flow or implicit solve fails are skipped (and reported); the
    mean is taken over the remaining ones. Accumulation follows batch order.
    """
    flow = flow or default_pipeline_flow(params.M)
    indices = list(range(len(features))) if indices is None else list(indices)
    items = list(zip(indices, features, labels))
    job = partial(_sample_job, params=params, flow=flow, idp=idp, pooling=pooling, spec=spec, scale=1.0)
    results = list(executor.map(job, items)) if executor is not None else [job(it) for it in items]
    ok = [r for r in results if r[1] is not None]
    skipped = [r[0] for r in results if r[1] is None]
    for r in results:
        if r[2] is not None:
            logger.warning("skipping %s", r[2])
    dW = np.zeros_like(params.W)
    dw_clf = np.zeros_like(params.w_clf)
    loss = 0.0
    if ok:
        n = len(ok)
        for _, (l, gW, gc, _), _ in ok:
            loss += l / n
            dW += gW / n
            dw_clf += gc / n
    return BatchGrads(loss, dW, dw_clf, skipped)


def batch_loss(features, labels, params, flow=None, pooling="flowpool", spec: CostSpec = SQEUCLIDEAN) -> float:
    flow = flow or default_pipeline_flow(params.M)
    total = 0.0
    for Z, y in zip(features, labels):
        logits, _ = forward_features(Z, params, flow, pooling, spec)
        total += cross_entropy(logits, y)
    return total / len(features)


def _eval_job(item, params, flow, pooling, spec):
    index, Z, label = item
    try:
        logits, _ = forward_features(Z, params, flow, pooling, spec)
    except FlowError as exc:
        return index, None, f"graph {index}: {exc}"
    return index, logits, None


def evaluate(features, labels, params, flow, pooling="flowpool", spec=SQEUCLIDEAN, indices=None, executor=None):
    """Mean cross-entropy and accuracy. A graph whose forward pass fails counts as misclassified."""
    indices = list(range(len(features))) if indices is None else list(indices)
    items = list(zip(indices, features, labels))
    job = partial(_eval_job, params=params, flow=flow, pooling=pooling, spec=spec)
    results = list(executor.map(job, items)) if executor is not None else [job(it) for it in items]
    losses, correct = [], 0
    for (_, logits, err), y in zip(results, labels):
        if logits is None:
            logger.warning("evaluation failure: %s", err)
            losses.append(np.log(params.w_clf.shape[1]))
            continue
        losses.append(cross_entropy(logits, y))
        correct += int(np.argmax(logits) == y)
    return float(np.mean(losses)), correct / len(labels)


class Adam:
    def __init__(self, shapes, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1 ** self.t)
            v_hat = self.v[k] / (1 - self.beta2 ** self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


@dataclass
class FoldResult:
    test_accuracy: float
    best_epoch: int
    epochs_run: int
    best_val_loss: float
    skipped: int
    attempted: int


def train_fold(features, labels, split, kinds, num_classes, config: TrainConfig, flow: FlowParams,
               idp: ImplicitDiffParams, X0, fold_seed: int, spec: CostSpec = SQEUCLIDEAN,
               executor=None) -> FoldResult:
    """Adam on the training part, early stopping on validation loss, test accuracy of the best weights."""
    train, val, test = split
    params = init_model(kinds, num_classes, config.d, config.M, fold_seed, X0=X0)
    opt = Adam([params.W.shape, params.w_clf.shape], config.learning_rate, config.beta1, config.beta2,
               config.adam_eps)
    rng = np.random.default_rng(fold_seed)
    best = params.copy()
    best_val, best_epoch = np.inf, 0
    skipped = attempted = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(train)
        for start in range(0, order.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = backward([features[i] for i in batch], [labels[i] for i in batch], params, flow, idp,
                             config.pooling, spec, indices=batch, executor=executor)
            attempted += batch.size
            skipped += len(grads.skipped)
            if skipped > MAX_SKIP_RATE * attempted and skipped > 1:
                raise TrainingError(
                    f"skip rate {skipped}/{attempted} exceeds {MAX_SKIP_RATE:.0%}; last skipped {grads.skipped}"
                )
            if len(grads.skipped) == batch.size:
                continue
            params.W, params.w_clf = opt.step([params.W, params.w_clf], [grads.dW, grads.dw_clf])
        val_loss, _ = evaluate([features[i] for i in val], [labels[i] for i in val], params, flow,
                               config.pooling, spec, indices=val, executor=executor)
        if val_loss < best_val:
            best_val, best_epoch, best = val_loss, epoch, params.copy()
        elif epoch - best_epoch >= config.patience:
            break
    _, acc = evaluate([features[i] for i in test], [labels[i] for i in test], best, flow, config.pooling,
                      spec, indices=test, executor=executor)
    return FoldResult(acc, best_epoch, epoch, float(best_val), skipped, attempted)


def _flow_dict(flow: FlowParams) -> Dict:
    return dataclasses.asdict(flow)


def train_eval_cv(ds: GraphDataset, config: TrainConfig = TrainConfig(), flow: FlowParams = None,
                  idp: ImplicitDiffParams = ImplicitDiffParams(), spec: CostSpec = SQEUCLIDEAN) -> CvReport:
    """Stratified k-fold evaluation; returns per-fold test accuracy, mean and std."""
    flow = flow or default_pipeline_flow(config.M)
    if len(ds) == 0:
        raise ValueError("empty dataset")
    labels = ds.labels
    features = [graph_features(g, ds.num_node_label_kinds, config.sgc_k) for g in ds.graphs]
    splits = stratified_kfold(labels, config.folds, config.seed, config.val_fraction)
    X0 = init_reference(config.M, config.d, config.seed)
    folds = []
    executor = ProcessPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for k, split in enumerate(splits):
            res = train_fold(features, labels, split, ds.num_node_label_kinds, ds.num_classes, config, flow,
                             idp, X0, config.seed + 1000 * (k + 1), spec, executor)
            logger.info("fold %d: test accuracy %.4f (best epoch %d of %d)", k, res.test_accuracy,
                        res.best_epoch, res.epochs_run)
            folds.append(res)
    finally:
        if executor is not None:
            executor.shutdown()
    accs = [f.test_accuracy for f in folds]
    manifest = {
        "dataset": ds.name,
        "num_graphs": len(ds),
        "pooling": config.pooling,
        "seeds": {"split": config.seed, "x0": config.seed,
                  "folds": [config.seed + 1000 * (k + 1) for k in range(len(splits))]},
        "x0_digest": array_digest(X0),
        "git_revision": git_revision(),
        "folds": [dataclasses.asdict(f) for f in folds],
        "std_convention": "population (ddof=0)",
    }
    cfg = {"train": dataclasses.asdict(config), "flow": _flow_dict(flow), "implicit": dataclasses.asdict(idp)}
    return CvReport(accs, float(np.mean(accs)), float(np.std(accs)), cfg, manifest)
