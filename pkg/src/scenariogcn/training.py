"""Class-weighted cross-entropy training with Adam and a step schedule."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as tn
from .model import N_CLASSES, ModelParams, forward_logits, prepare_inputs
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "lr", "train_loss", "val_mean_pr_auc")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    lr0: float = 1e-4
    decay_factor: float = 0.1
    decay_after_epochs: tuple = (8, 14, 18)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        object.__setattr__(self, "decay_after_epochs", tuple(sorted(self.decay_after_epochs)))


@dataclass(frozen=True)
class ClassWeights:
    """Inverse-frequency weights, kept as exact fractions."""

    exact: tuple
    counts: tuple

    @property
    def values(self) -> np.ndarray:
        return np.array([float(w) for w in self.exact])


def compute_class_weights(label_counts, n_classes: int | None = None) -> ClassWeights:
    """``w_i = N / (n_classes * n_i)`` for every class."""
    counts = [int(c) for c in label_counts]
    n_classes = n_classes or len(counts)
    if len(counts) != n_classes:
        raise ValueError(f"expected {n_classes} counts, got {len(counts)}")
    missing = [i for i, c in enumerate(counts) if c <= 0]
    if missing:
        raise ConfigurationError(
            f"class(es) {missing} have no training frames; add sequences containing them "
            "(e.g. generate more synthetic data) before training"
        )
    total = sum(counts)
    exact = tuple(Fraction(total, n_classes * c) for c in counts)
    return ClassWeights(exact, tuple(counts))


def label_counts(label_lists, n_classes: int = N_CLASSES) -> np.ndarray:
    counts = np.zeros(n_classes, dtype=np.int64)
    for labels in label_lists:
        counts += np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)[:n_classes]
    return counts


def weighted_cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """Mean over frames of ``w[y_t] * -log softmax(logits_t)[y_t]``."""
    labels = np.asarray(labels, dtype=np.int64)
    t_len, n = logits.shape
    if labels.shape != (t_len,):
        raise ValueError(f"need {t_len} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError("label out of range")
    w = weights.values if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    pick = np.zeros((t_len, n))
    pick[np.arange(t_len), labels] = -w[labels] / t_len
    return tn.sum(tn.scale(tn.log_softmax(logits), pick))


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-indexed epoch; decays after each listed epoch."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    n_decays = sum(1 for e in cfg.decay_after_epochs if epoch > e)
    return cfg.lr0 * cfg.decay_factor ** n_decays


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params`` arrays.

    ``params`` and ``grads`` map names to arrays; missing grads count as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise FloatingPointError(
                f"non-finite gradient for {name!r} ({bad} entries) at Adam step {state.step + 1}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def training_step(params: ModelParams, inp, labels, weights) -> float:
    params.zero_grad()
    loss = weighted_cross_entropy(forward_logits(params, inp), labels, weights)
    tn.backward(loss)
    return float(loss.data)


@dataclass
class TrainResult:
    params: ModelParams
    log: list
    weights: ClassWeights


def train(cfg: TrainConfig, params: ModelParams, train_batches, val_batches=(),
          on_epoch=None, stop=None) -> TrainResult:
    """Train in place, one sequence per Adam step, shuffled per epoch by seed.

    ``on_epoch(row)`` is called after each epoch; ``stop(row)`` returning true
    ends training early.  Each log row has the ``METRICS_COLUMNS`` keys.
    """
    from .metrics import evaluate_batches

    train_batches = list(train_batches)
    if not train_batches:
        raise ValueError("training split is empty")
    val_batches = list(val_batches)
    weights = compute_class_weights(label_counts(b.labels for b in train_batches))
    inputs = [prepare_inputs(b, params.config) for b in train_batches]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    arrays = {k: t.data for k, t in params}
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(train_batches))
        total = 0.0
        for i in order:
            loss = training_step(params, inputs[i], train_batches[i].labels, weights)
            grads = {k: t.grad for k, t in params}
            adam_step(arrays, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss
        val = math.nan
        if val_batches:
            val = evaluate_batches(params, val_batches).mean_pr_auc
        row = {"epoch": epoch, "lr": lr, "train_loss": total / len(order), "val_mean_pr_auc": val}
        log.info("epoch %d lr %.1e loss %.5f val PR-AUC %.4f", epoch, lr, row["train_loss"], val)
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if stop is not None and stop(row):
            break
    params.zero_grad()
    return TrainResult(params, rows, weights)


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(float(r["lr"])), repr(float(r["train_loss"])),
                        repr(float(r["val_mean_pr_auc"]))])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "lr": float(r["lr"]), "train_loss": float(r["train_loss"]),
             "val_mean_pr_auc": float(r["val_mean_pr_auc"])}
            for r in csv.DictReader(fh)
        ]
