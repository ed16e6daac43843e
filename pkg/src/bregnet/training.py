"""Losses, the momentum optimizer and the epoch loop."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad
from .errors import ContractError, NumericalError
from .model import CLASSIFICATION, REGRESSION

log = logging.getLogger(__name__)

LOSSES = ("regular", "weighted", "mse")
TRACE_COLUMNS = ("epoch", "train_loss", "train_metric", "val_loss", "val_metric")


@dataclass(frozen=True)
class PenaltyMatrix:
    """Diagonal class weights ``f_min / f_i``; off-diagonal entries are zero."""

    diag: np.ndarray
    class_counts: tuple

    @property
    def num_classes(self):
        return len(self.diag)

    def dense(self):
        return np.diag(self.diag)


def penalty_matrix(class_counts):
    counts = [int(c) for c in class_counts]
    if not counts:
        raise ContractError("penalty_matrix needs at least one class")
    if any(c < 1 for c in counts):
        empty = [i for i, c in enumerate(counts) if c < 1]
        raise ContractError(f"classes {empty} have no samples and cannot be weighted")
    f_min = min(counts)
    diag = np.array([f_min / c for c in counts], dtype=np.float64)
    diag.setflags(write=False)
    return PenaltyMatrix(diag, tuple(counts))


def _check_labels(labels, n, k):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ContractError("labels must be integers")
        labels = labels.astype(np.int64)
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        raise ContractError(f"label {labels[bad][0]} outside [0, {k})")
    return labels


def weighted_cross_entropy(logits, labels, H):
    """Batch mean of ``-H[l, l] * log softmax(logits)[l]`` for true label ``l``."""
    logits = ad.as_tensor(logits)
    if logits.ndim != 2:
        raise ContractError(f"logits must be [n, K], got {list(logits.shape)}")
    n, k = logits.shape
    weights = H.diag if isinstance(H, PenaltyMatrix) else np.asarray(H, dtype=np.float64)
    if weights.shape != (k,):
        raise ContractError(f"penalty matrix has {weights.shape[0]} classes, logits have {k}")
    labels = _check_labels(labels, n, k)
    pick = np.zeros((n, k))
    pick[np.arange(n), labels] = -weights[labels] / n
    return ad.sum(ad.log_softmax(logits) * pick)


def cross_entropy(logits, labels):
    logits = ad.as_tensor(logits)
    return weighted_cross_entropy(logits, labels, np.ones(logits.shape[1]))


def mse_loss(pred, target):
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss: shape {list(pred.shape)} != {list(target.shape)}")
    diff = pred - target
    return ad.mean(diff * diff)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)


def momentum_step(params, grads, state):
    """Classical momentum with coupled weight decay.

    ``v <- mu * v + (g + wd * theta)``, ``theta <- theta - lr * v``.
    ``params`` and ``grads`` map names to Tensors or arrays.  Returns the new
    parameter mapping (Tensors); ``state.velocity`` is updated in place.
    """
    for name, g in grads.items():
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if not np.isfinite(g).all():
            raise NumericalError("momentum_step", f"gradient of {name!r} is not finite")
    new_params = {}
    for name, p in params.items():
        theta = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        g = grads.get(name)
        g = np.zeros(theta.shape) if g is None else (g.data if isinstance(g, Tensor) else np.asarray(g))
        if g.shape != theta.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(theta.shape)
        elif v.shape != theta.shape:
            raise ContractError(f"{name}: velocity shape {v.shape} != parameter shape {theta.shape}")
        v = state.momentum * v + (g + state.weight_decay * theta)
        state.velocity[name] = v
        new_params[name] = Tensor(theta - state.lr * v)
    return new_params, state


# ---------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_metric: float
    val_loss: float = math.nan
    val_metric: float = math.nan


@dataclass
class TrainResult:
    net: object
    trace: list
    penalty: PenaltyMatrix = None


def _task_of(net):
    return net.config.head


def _loss_fn(loss, penalty):
    if loss == "mse":
        return mse_loss
    if loss == "weighted":
        return lambda out, y: weighted_cross_entropy(out, y, penalty)
    return cross_entropy


def _metric(task, out, y):
    # accuracy for classification, mean RMSE over the two outputs for regression
    if task == CLASSIFICATION:
        return float(np.mean(out.argmax(axis=1) == y))
    return float(np.mean(np.sqrt(np.mean((np.clip(out, -1, 1) - y) ** 2, axis=0))))


def evaluate(net, data, loss="regular", penalty=None, batch_size=256):
    """Inference-mode (loss, metric) over a whole dataset."""
    outs = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            outs.append(net.forward(data.images[start:start + batch_size], training=False).data)
    out = np.concatenate(outs)
    with no_grad():
        value = _loss_fn(loss, penalty)(Tensor(out), data.labels).item()
    return value, _metric(_task_of(net), out, data.labels)


def train(net, data, loss="regular", optimizer=None, epochs=10, seed=0, batch_size=32,
          val_data=None, class_counts=None, on_epoch=None):
    """Mini-batch training with momentum.  Mutates and returns ``net``.

    Shuffling uses ``seed`` only, so runs are reproducible.  ``class_counts``
    overrides the counts the weighted loss derives from ``data``.
    """
    if loss not in LOSSES:
        raise ContractError(f"loss must be one of {LOSSES}, got {loss!r}")
    if len(data) == 0:
        raise ContractError("training data is empty")
    task = _task_of(net)
    if (task == REGRESSION) != (loss == "mse") or data.task != ("dimensional" if task == REGRESSION else "categorical"):
        raise ContractError(f"loss {loss!r} / data task {data.task!r} do not match a {task} head")
    if task == CLASSIFICATION and data.num_classes != net.config.num_classes:
        raise ContractError(f"data has {data.num_classes} classes, network head has {net.config.num_classes}")
    if epochs < 0:
        raise ContractError("epochs must be non-negative")
    state = optimizer if optimizer is not None else OptimizerState()
    penalty = None
    if loss == "weighted":
        penalty = penalty_matrix(class_counts if class_counts is not None else data.class_frequencies())
    loss_fn = _loss_fn(loss, penalty)
    rng = np.random.default_rng(seed)
    n = len(data)
    min_batch = 2 if net.config.use_batch_norm else 1
    trace = []

    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total, metric_sum, seen = 0.0, 0.0, 0
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            if len(idx) < min_batch:
                continue
            x, y = data.images[idx], data.labels[idx]
            params = {k: Tensor(v.data, requires_grad=True) for k, v in net.params.items()}
            try:
                # overflow surfaces as NumericalError at the next op boundary
                with np.errstate(over="ignore", invalid="ignore"):
                    out = net.forward(x, training=True, params=params)
                    value = loss_fn(out, y)
                    grads = backward(value, wrt=params.values())
                named = {k: grads[t.id] for k, t in params.items()}
                net.params, state = momentum_step(params, named, state)
            except NumericalError as exc:
                raise NumericalError("train", f"diverged at epoch {epoch}, step {step}: {exc}") from exc
            total += value.item() * len(idx)
            metric_sum += _metric(task, out.data, y) * len(idx)
            seen += len(idx)
        record = EpochRecord(epoch, total / max(seen, 1), metric_sum / max(seen, 1))
        if val_data is not None and len(val_data):
            record.val_loss, record.val_metric = evaluate(net, val_data, loss, penalty)
        log.info("epoch %d train_loss=%.6f train_metric=%.4f val_loss=%.6f val_metric=%.4f",
                 record.epoch, record.train_loss, record.train_metric, record.val_loss, record.val_metric)
        trace.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(net, trace, penalty)


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:]])
