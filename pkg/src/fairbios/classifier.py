"""Softmax linear classifier trained with weighted cross-entropy.

Mini-batch gradient descent with linear warm-up followed by linear decay,
per-epoch evaluation of dev macro-F1 and early stopping on it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import fairmetrics
from .errors import (
    DimensionMismatch,
    EmptyData,
    FeaturizerMismatch,
    LabelOutOfRange,
    NonFiniteLoss,
)
from .featurize import FeatureVector, FeaturizerConfig, to_csr

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class LinearModel:
    weights: np.ndarray  # (K, D)
    bias: np.ndarray  # (K,)

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "LinearModel":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearModel":
        return LinearModel(self.weights.copy(), self.bias.copy())


@dataclass
class TrainConfig:
    learning_rate: float = 2.0
    batch_size: int = 16
    max_epochs: int = 6
    warmup_fraction: float = 0.1
    early_stop_patience: int = 2
    seed: int = 0
    l2_penalty: float = 1e-6

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.learning_rate <= 0 or self.l2_penalty < 0:
            raise ValueError("learning_rate must be positive and l2_penalty non-negative")


@dataclass
class TrainReport:
    dev_macro_f1: list[float] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


class EarlyStopping:
    """Track the best score; epochs are numbered from 1, ties keep the earliest."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, score: float) -> bool:
        """Record the next epoch's score and return True if it is a new best."""
        self.epoch += 1
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch >= self.patience


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Learning rate for optimizer step ``step`` (0-based): linear ramp from 0
    to ``base_lr`` over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))


def _as_matrix(X, dim: int | None = None) -> sp.csr_matrix:
    if sp.issparse(X):
        return sp.csr_matrix(X)
    return to_csr(list(X), dim)


def _check_dim(model: LinearModel, X: sp.csr_matrix):
    if X.shape[1] != model.dim:
        raise DimensionMismatch(f"feature dim {X.shape[1]} != model dim {model.dim}")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _weighted_ce(logits, y, w):
    """Weighted mean cross-entropy and its gradient w.r.t. the logits."""
    logp = _log_softmax(logits)
    wn = w / w.sum()
    loss = -float(np.dot(wn, logp[np.arange(len(y)), y]))
    g = np.exp(logp)
    g[np.arange(len(y)), y] -= 1.0
    g *= wn[:, None]
    return loss, g


def loss_and_grad(model: LinearModel, batch: Sequence[tuple[FeatureVector, int, float]],
                  l2_penalty: float = 0.0) -> tuple[float, LinearModel]:
    """Weighted cross-entropy plus ``l2_penalty * ||weights||^2`` on one batch.

    The data term is normalised by the sum of sample weights, so uniform
    weights of any magnitude give the unweighted mean. The bias is not
    penalised. Returns the loss and a :class:`LinearModel` holding the gradient.
    """
    if not batch:
        raise EmptyData("empty batch")
    xs, ys, ws = zip(*batch)
    y = np.asarray(ys, dtype=np.int64)
    w = np.asarray(ws, dtype=np.float64)
    if (y < 0).any() or (y >= model.num_classes).any():
        raise LabelOutOfRange(f"labels must lie in [0, {model.num_classes})")
    if (w <= 0).any():
        raise ValueError("sample weights must be positive")
    X = _as_matrix(xs, model.dim)
    _check_dim(model, X)
    logits = np.asarray(X @ model.weights.T) + model.bias
    loss, g = _weighted_ce(logits, y, w)
    loss += l2_penalty * float(np.sum(model.weights ** 2))
    grad_w = np.asarray((X.T @ g).T) + 2.0 * l2_penalty * model.weights
    return loss, LinearModel(grad_w, g.sum(axis=0))


def predict_proba(model: LinearModel, X) -> np.ndarray:
    """Row-wise softmax probabilities, shape ``(n, K)``."""
    X = _as_matrix(X, model.dim)
    _check_dim(model, X)
    return _softmax(np.asarray(X @ model.weights.T) + model.bias)


def predict_scores(model: LinearModel, x: FeatureVector) -> np.ndarray:
    if x.dim != model.dim:
        raise DimensionMismatch(f"feature dim {x.dim} != model dim {model.dim}")
    logits = model.weights[:, x.indices] @ x.values + model.bias
    return _softmax(logits[None, :])[0]


def predict_label(model: LinearModel, x: FeatureVector) -> int:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    return int(np.argmax(predict_scores(model, x)))


def predict_labels(model: LinearModel, X) -> np.ndarray:
    return np.argmax(predict_proba(model, X), axis=1)


def train(train_data, dev_data, class_weights=None, cfg: TrainConfig = TrainConfig(),
          num_classes: int | None = None) -> tuple[LinearModel, TrainReport]:
    """Fit a :class:`LinearModel`.

    ``train_data`` and ``dev_data`` are ``(X, y)`` pairs where ``X`` is a CSR
    matrix or a sequence of :class:`FeatureVector`. ``class_weights`` is a
    length-K vector (each sample is weighted by the entry for its label) or
    ``None`` for uniform weights. The parameters of the best dev epoch are
    returned.

    The L2 term is applied as multiplicative decay on a scaled copy of the
    weights (``W = scale * V``) so that each step only touches the columns
    present in the batch; the update is algebraically identical to a dense
    gradient step on the penalised loss.
    """
    Xtr, ytr = train_data
    Xdev, ydev = dev_data
    Xtr = _as_matrix(Xtr)
    Xdev = _as_matrix(Xdev, Xtr.shape[1])
    ytr = np.asarray(ytr, dtype=np.int64)
    ydev = np.asarray(ydev, dtype=np.int64)
    if Xtr.shape[0] == 0 or Xdev.shape[0] == 0:
        raise EmptyData("train and dev data must be non-empty")
    if Xtr.shape[0] != len(ytr) or Xdev.shape[0] != len(ydev):
        raise ValueError("feature rows and labels differ in length")
    K = num_classes or int(max(ytr.max(), ydev.max())) + 1
    if class_weights is None:
        class_weights = np.ones(K)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (K,) or (class_weights <= 0).any():
        raise ValueError("class_weights must be a positive length-K vector")
    for y in (ytr, ydev):
        if (y < 0).any() or (y >= K).any():
            raise LabelOutOfRange(f"labels must lie in [0, {K})")

    n, D = Xtr.shape
    bs = cfg.batch_size
    steps_per_epoch = -(-n // bs)
    total_steps = steps_per_epoch * cfg.max_epochs
    warmup_steps = int(round(cfg.warmup_fraction * total_steps))
    sample_w = class_weights[ytr]
    l2 = cfg.l2_penalty

    V = np.zeros((D, K))  # transposed, scaled weights
    scale = 1.0
    b = np.zeros(K)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.early_stop_patience)
    report = TrainReport()
    best = LinearModel.zeros(K, D)
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        Xp = Xtr[perm]
        yp, wp = ytr[perm], sample_w[perm]
        indptr, indices, data = Xp.indptr, Xp.indices, Xp.data
        loss_sum = 0.0
        for start in range(0, n, bs):
            stop = min(start + bs, n)
            lo, hi = indptr[start], indptr[stop]
            cols, inv = np.unique(indices[lo:hi], return_inverse=True)
            rows = np.repeat(np.arange(stop - start), np.diff(indptr[start:stop + 1]))
            Xc = np.zeros((stop - start, len(cols)))
            Xc[rows, inv] = data[lo:hi]
            logits = scale * (Xc @ V[cols]) + b
            loss, g = _weighted_ce(logits, yp[start:stop], wp[start:stop])
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {step}")
            loss_sum += loss
            lr = lr_at(step, total_steps, warmup_steps, cfg.learning_rate)
            new_scale = scale * (1.0 - 2.0 * lr * l2)
            V[cols] -= (lr / new_scale) * (Xc.T @ g)
            b -= lr * g.sum(axis=0)
            scale = new_scale
            if scale < 1e-4:
                V *= scale
                scale = 1.0
            if not (np.isfinite(V[cols]).all() and np.isfinite(b).all()):
                raise NonFiniteLoss(f"non-finite parameters at epoch {epoch}, step {step}")
            step += 1

        model = LinearModel(np.ascontiguousarray((V * scale).T), b.copy())
        penalty = l2 * float(np.sum(model.weights ** 2))
        probs = predict_proba(model, Xdev)
        dev_f1 = fairmetrics.macro_f1(ydev, np.argmax(probs, axis=1), K)
        dev_loss = -float(np.mean(np.log(np.maximum(probs[np.arange(len(ydev)), ydev], 1e-300)))) + penalty
        report.dev_macro_f1.append(dev_f1)
        report.dev_loss.append(dev_loss)
        report.train_loss.append(loss_sum / steps_per_epoch + penalty)
        logger.info("epoch %d: train loss %.4f, dev loss %.4f, dev macro-F1 %.4f",
                    epoch, report.train_loss[-1], dev_loss, dev_f1)
        if stopper.update(dev_f1):
            best = model
        if stopper.should_stop and epoch < cfg.max_epochs:
            report.stopped_early = True
            break

    report.best_epoch = stopper.best_epoch
    return best, report


def save_checkpoint(path, model: LinearModel, featurizer: FeaturizerConfig) -> None:
    path = Path(path)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "num_classes": model.num_classes,
        "dim": model.dim,
        "featurizer": asdict(featurizer),
        "featurizer_hash": featurizer.fingerprint(),
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), weights=model.weights, bias=model.bias)


def load_checkpoint(path, featurizer: FeaturizerConfig | None = None) -> tuple[LinearModel, FeaturizerConfig]:
    """Load a checkpoint; if ``featurizer`` is given its fingerprint must match."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        weights, bias = data["weights"], data["bias"]
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FeaturizerMismatch(f"unsupported checkpoint version {meta.get('format_version')}")
    stored = FeaturizerConfig(**meta["featurizer"])
    if stored.fingerprint() != meta["featurizer_hash"]:
        raise FeaturizerMismatch("checkpoint featurizer hash does not match its stored config")
    if featurizer is not None and featurizer.fingerprint() != meta["featurizer_hash"]:
        raise FeaturizerMismatch(
            f"checkpoint built with featurizer {meta['featurizer_hash']}, got {featurizer.fingerprint()}")
    if weights.shape != (meta["num_classes"], meta["dim"]):
        raise DimensionMismatch("checkpoint weight shape disagrees with its header")
    return LinearModel(weights, bias), stored
