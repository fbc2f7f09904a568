"""Frame-level evaluation: PR-AUC, per-class accuracy and the Error Distribution Diagram."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .model import N_CLASSES, model_forward

log = logging.getLogger(__name__)

# Order used in reports; the first three sit above the serious-error line.
EDD_CATEGORIES = (
    "overfill",
    "underfill",
    "underfill_substitute",
    "underfill_overfill",
    "merge",
    "fragmentation",
    "fragmentation_substitute",
    "insertion",
    "deletion",
)
SERIOUS_CATEGORIES = frozenset(
    {"merge", "fragmentation", "fragmentation_substitute", "insertion", "deletion"}
)


class Segment(NamedTuple):
    cls: int
    start: int
    end: int  # inclusive


def segmentize(labels) -> list[Segment]:
    """Maximal runs of equal labels, in order."""
    labels = [int(c) for c in labels]
    if not labels:
        raise ValueError("cannot segmentize an empty label sequence")
    out = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            out.append(Segment(labels[start], start, i - 1))
            start = i
    return out


# ---------------------------------------------------------------- EDD


@dataclass
class EDDReport:
    counts: dict = field(default_factory=lambda: {c: 0 for c in EDD_CATEGORIES})
    correct: int = 0

    @property
    def total(self) -> int:
        return self.correct + sum(self.counts.values())

    @property
    def serious(self) -> int:
        return sum(v for k, v in self.counts.items() if k in SERIOUS_CATEGORIES)

    @property
    def serious_fraction(self) -> float:
        return self.serious / self.total if self.total else 0.0

    def __getitem__(self, key) -> int:
        return self.correct if key == "correct" else self.counts[key]

    def __add__(self, other: "EDDReport") -> "EDDReport":
        counts = {k: self.counts[k] + other.counts[k] for k in EDD_CATEGORIES}
        return EDDReport(counts, self.correct + other.correct)

    def as_dict(self) -> dict:
        return {**self.counts, "correct": self.correct}


def _fn_category(gt, pred, seg_lo, seg_hi, c, t):
    """Category of an uncovered frame ``t`` inside GT segment ``[seg_lo, seg_hi]`` of class c."""
    hit = np.flatnonzero(pred[seg_lo: seg_hi + 1] == c)
    if hit.size == 0:
        return "deletion"
    first, last = seg_lo + hit[0], seg_lo + hit[-1]
    sub = pred[t] != 0
    if first < t < last:
        return "fragmentation_substitute" if sub else "fragmentation"
    return "underfill_substitute" if sub else "underfill"


def _fp_category(gt, pred, seg_lo, seg_hi, c, t):
    """Category of a frame ``t`` of predicted segment ``[seg_lo, seg_hi]`` not in GT class c."""
    hit = np.flatnonzero(gt[seg_lo: seg_hi + 1] == c)
    if hit.size == 0:
        return "insertion"
    first, last = seg_lo + hit[0], seg_lo + hit[-1]
    if first < t < last:
        return "merge"
    return "overfill"


def edd_frame_categories(gt, pred) -> list[str]:
    """Assign each frame one EDD category (or ``correct``).

    Frames with a non-zero ground truth are judged on the missed-scenario
    side (deletion, underfill, fragmentation, substitute variants when the
    prediction is another non-zero class).  A substituted frame that is
    underfill for its own scenario and overfill for the neighbouring
    predicted one is ``underfill_overfill``.  Frames with ground truth 0 are
    judged on the false-alarm side (insertion, overfill, merge).
    """
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValueError(f"gt and pred lengths differ: {gt.shape} vs {pred.shape}")
    gt_seg = np.empty(len(gt), dtype=object)
    for s in segmentize(gt):
        gt_seg[s.start: s.end + 1] = [s] * (s.end - s.start + 1)
    pr_seg = np.empty(len(pred), dtype=object)
    for s in segmentize(pred):
        pr_seg[s.start: s.end + 1] = [s] * (s.end - s.start + 1)

    out = []
    for t in range(len(gt)):
        g, p = gt[t], pred[t]
        if g == p:
            out.append("correct")
            continue
        fp = _fp_category(gt, pred, pr_seg[t].start, pr_seg[t].end, p, t) if p != 0 else None
        if g == 0:
            out.append(fp)
            continue
        fn = _fn_category(gt, pred, gt_seg[t].start, gt_seg[t].end, g, t)
        if fn == "underfill_substitute" and fp == "overfill":
            out.append("underfill_overfill")
        else:
            out.append(fn)
    return out


def edd_decompose(gt, pred) -> EDDReport:
    report = EDDReport()
    for cat in edd_frame_categories(gt, pred):
        if cat == "correct":
            report.correct += 1
        else:
            report.counts[cat] += 1
    return report


# ---------------------------------------------------------------- PR curves


@dataclass
class PRCurve:
    cls: int
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    auc: float


def pr_curve(scores, positives, cls: int = 1) -> PRCurve:
    """One-vs-all precision/recall swept over the distinct scores, descending.

    The area uses step interpolation: each recall increment is weighted by
    the precision reached at that threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives).astype(bool)
    if scores.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError(f"class {cls}: no positive frames, PR curve undefined")
    order = np.argsort(-scores, kind="mergesort")
    s, yy = scores[order], y[order]
    tp = np.cumsum(yy)
    fp = np.cumsum(~yy)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    auc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(cls, recall, precision, s[last], auc)


def mean_pr_auc(probabilities, gt, n_classes: int = N_CLASSES):
    """Macro PR-AUC over classes present in ``gt``.

    Returns ``(mean, {class: auc})``; absent classes are skipped with a warning.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    per = {}
    missing = []
    for c in range(n_classes):
        if not np.any(gt == c):
            missing.append(c)
            continue
        per[c] = pr_curve(probabilities[:, c], gt == c, c).auc
    if missing:
        warnings.warn(f"classes {missing} absent from split; excluded from mean PR-AUC", stacklevel=2)
    if not per:
        raise ValueError("no class has positive frames")
    return float(np.mean(list(per.values()))), per


def per_class_accuracy(gt, pred, c: int) -> float:
    """Fraction of ground-truth class-c frames predicted as c."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    sel = gt == c
    if not sel.any():
        raise ValueError(f"class {c} does not occur in the ground truth")
    return float(np.mean(pred[sel] == c))


def per_class_accuracies(gt, pred, n_classes: int = N_CLASSES) -> dict:
    gt = np.asarray(gt)
    return {c: per_class_accuracy(gt, pred, c) for c in range(n_classes) if np.any(gt == c)}


# ---------------------------------------------------------------- split-level evaluation


@dataclass
class Evaluation:
    mean_pr_auc: float
    pr_auc: dict
    accuracy: dict
    edd: EDDReport
    frame_accuracy: float
    curves: dict
    predictions: list


def evaluate_predictions(gt_lists, prob_lists, label_lists=None) -> Evaluation:
    """Pool frames across sequences; EDD is summed per sequence."""
    prob_lists = [np.asarray(p) for p in prob_lists]
    if label_lists is None:
        label_lists = [p.argmax(axis=1) for p in prob_lists]
    gt = np.concatenate([np.asarray(g) for g in gt_lists])
    probs = np.concatenate(prob_lists)
    pred = np.concatenate([np.asarray(p) for p in label_lists])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mean, per = mean_pr_auc(probs, gt)
    for w in caught:
        log.warning("%s", w.message)
    curves = {c: pr_curve(probs[:, c], gt == c, c) for c in per}
    edd = EDDReport()
    for g, p in zip(gt_lists, label_lists):
        edd = edd + edd_decompose(g, p)
    return Evaluation(
        mean_pr_auc=mean,
        pr_auc=per,
        accuracy=per_class_accuracies(gt, pred),
        edd=edd,
        frame_accuracy=float(np.mean(gt == pred)),
        curves=curves,
        predictions=list(label_lists),
    )


def evaluate_batches(params, batches) -> Evaluation:
    preds = [model_forward(params, b) for b in batches]
    return evaluate_predictions(
        [b.labels for b in batches], [p.probabilities for p in preds], [p.labels for p in preds]
    )
