"""Classification metrics: confusion matrix, precision/recall/F1, one-vs-rest
ROC curves with micro and macro AUC, mean cross-entropy, and 2-fold
cross-validation.

Report text format (``MetricsReport.to_text``): one ``key=value`` per line.
Scalars are written with ``repr`` so a round trip is exact; vectors are
comma-separated in class order; ``confusion`` is row-major with rows = true
class; an undefined AUC is written as ``nan``. Keys: ``n_samples``,
``n_classes``, ``confusion``, ``precision``, ``recall``, ``f1``,
``macro_precision``, ``macro_recall``, ``macro_f1``, ``micro_precision``,
``micro_recall``, ``micro_f1``, ``auc_per_class``, ``auc_micro``,
``auc_macro``, ``mean_loss``, plus free-form ``extra.<name>`` entries.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ArgumentError
from .nnkernel import PROB_FLOOR

N_CLASSES = 4


def _check_labels(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise ArgumentError(f"labels must lie in 1..{k}")
    return labels


def confusion_matrix(true_labels, predicted_labels, n_classes=N_CLASSES):
    t = _check_labels(true_labels, n_classes)
    p = _check_labels(predicted_labels, n_classes)
    if t.shape != p.shape:
        raise ArgumentError("true and predicted label lists differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t - 1, p - 1), 1)
    return cm


def _safe_div(a, b):
    return a / b if b else 0.0


def confusion_and_f1(true_labels, predicted_labels, n_classes=N_CLASSES):
    """Per-class and averaged precision, recall and F1 as a dict."""
    cm = confusion_matrix(true_labels, predicted_labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    prec = np.array([_safe_div(tp[c], cm[:, c].sum()) for c in range(n_classes)])
    rec = np.array([_safe_div(tp[c], cm[c, :].sum()) for c in range(n_classes)])
    f1 = np.array([_safe_div(2 * p * r, p + r) for p, r in zip(prec, rec)])
    total = cm.sum()
    micro = _safe_div(tp.sum(), total)  # single-label: micro P = R = F1 = accuracy
    return {
        "confusion": cm,
        "precision": prec,
        "recall": rec,
        "f1": f1,
        "macro_precision": float(prec.mean()),
        "macro_recall": float(rec.mean()),
        "macro_f1": float(f1.mean()),
        "micro_precision": float(micro),
        "micro_recall": float(micro),
        "micro_f1": float(micro),
    }


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def auc(self):
        return trapezoid_auc(self.fpr, self.tpr)


def roc_curve(scores, positive):
    """Threshold sweep over distinct scores, highest first.

    The curve starts at (0, 0) with threshold +inf, has one point per
    distinct score (equal scores form a single step), and ends with an
    explicit (1, 1) point at threshold -inf.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1] if len(s) else np.array([], int)
    tp = np.cumsum(pos)[last_of_group]
    fp = np.cumsum(~pos)[last_of_group]
    tpr = tp / n_pos if n_pos else np.zeros(len(tp))
    fpr = fp / n_neg if n_neg else np.zeros(len(fp))
    return RocCurve(
        np.r_[0.0, fpr, 1.0],
        np.r_[0.0, tpr, 1.0],
        np.r_[np.inf, s[last_of_group], -np.inf],
    )


def trapezoid_auc(fpr, tpr):
    fpr, tpr = np.asarray(fpr, dtype=np.float64), np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def _check_scores(scores, n_classes):
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != n_classes:
        raise ArgumentError(f"scores must be [n, {n_classes}]")
    if s.size and np.max(np.abs(s.sum(axis=1) - 1.0)) > 1e-4:
        raise ArgumentError("score rows must sum to 1 within 1e-4")
    return s


def roc_auc(scores, true_labels, n_classes=N_CLASSES):
    """Return ``(curves, auc_per_class, auc_micro, auc_macro)``.

    A class without positives (or without negatives) has an undefined AUC,
    reported as NaN and left out of the macro average.
    """
    s = _check_scores(scores, n_classes)
    t = _check_labels(true_labels, n_classes)
    onehot = t[:, None] == np.arange(1, n_classes + 1)[None, :]
    curves, aucs = [], []
    for c in range(n_classes):
        curve = roc_curve(s[:, c], onehot[:, c])
        curves.append(curve)
        n_pos = int(onehot[:, c].sum())
        if n_pos == 0 or n_pos == len(t):
            warnings.warn(f"class {c + 1} has no {'positives' if n_pos == 0 else 'negatives'}; AUC undefined")
            aucs.append(math.nan)
        else:
            aucs.append(curve.auc())
    aucs = np.array(aucs)
    micro = roc_curve(s.ravel(), onehot.ravel()).auc() if len(t) else math.nan
    defined = aucs[~np.isnan(aucs)]
    macro = float(defined.mean()) if defined.size else math.nan
    return curves, aucs, float(micro), macro


def mean_cross_entropy(scores, true_labels, n_classes=N_CLASSES):
    s = np.asarray(scores, dtype=np.float64)
    t = _check_labels(true_labels, n_classes)
    if s.ndim != 2 or len(s) != len(t):
        raise ArgumentError("one score row per label required")
    pt = s[np.arange(len(t)), t - 1]
    if not len(t):
        return math.nan
    # fsum is exactly rounded, so the result does not depend on sample order
    return math.fsum(-np.log(np.maximum(pt, PROB_FLOOR))) / len(t)


@dataclass
class MetricsReport:
    n_samples: int
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    auc_per_class: np.ndarray
    auc_micro: float
    auc_macro: float
    mean_loss: float
    extra: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.precision)

    def to_text(self):
        def vec(a):
            return ",".join(repr(float(v)) for v in np.ravel(a))

        lines = [f"n_samples={self.n_samples}", f"n_classes={self.n_classes}",
                 "confusion=" + ",".join(str(int(v)) for v in self.confusion.ravel())]
        for f in fields(self):
            if f.name in ("n_samples", "confusion", "extra"):
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={vec(v) if isinstance(v, np.ndarray) else repr(float(v))}")
        lines += [f"extra.{k}={v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            if line and not line.startswith("#"):
                k, v = line.split("=", 1)
                kv[k] = v
        k = int(kv["n_classes"])

        def vec(key):
            return np.array([float(x) for x in kv[key].split(",")])

        return cls(
            n_samples=int(kv["n_samples"]),
            confusion=np.array([int(x) for x in kv["confusion"].split(",")], dtype=np.int64).reshape(k, k),
            precision=vec("precision"), recall=vec("recall"), f1=vec("f1"),
            macro_precision=float(kv["macro_precision"]), macro_recall=float(kv["macro_recall"]),
            macro_f1=float(kv["macro_f1"]), micro_precision=float(kv["micro_precision"]),
            micro_recall=float(kv["micro_recall"]), micro_f1=float(kv["micro_f1"]),
            auc_per_class=vec("auc_per_class"), auc_micro=float(kv["auc_micro"]),
            auc_macro=float(kv["auc_macro"]), mean_loss=float(kv["mean_loss"]),
            extra={key[6:]: v for key, v in kv.items() if key.startswith("extra.")},
        )


def evaluate(scores, true_labels, n_classes=N_CLASSES) -> MetricsReport:
    """Full report for probability rows ``scores`` against 1-based labels."""
    s = _check_scores(scores, n_classes)
    t = _check_labels(true_labels, n_classes)
    pred = s.argmax(axis=1) + 1
    prf = confusion_and_f1(t, pred, n_classes)
    _, aucs, micro, macro = roc_auc(s, t, n_classes)
    return MetricsReport(
        n_samples=len(t), auc_per_class=aucs, auc_micro=micro, auc_macro=macro,
        mean_loss=mean_cross_entropy(s, t, n_classes), **prf,
    )


def average_reports(reports):
    """Arithmetic mean of every rate and loss; confusion counts are summed."""
    if not reports:
        raise ArgumentError("no reports to average")
    out = {}
    for f in fields(MetricsReport):
        vals = [getattr(r, f.name) for r in reports]
        if f.name == "confusion":
            out[f.name] = np.sum(vals, axis=0)
        elif f.name == "n_samples":
            out[f.name] = int(sum(vals))
        elif f.name == "extra":
            out[f.name] = {}
        elif f.name == "auc_per_class":
            arr = np.array(vals, dtype=np.float64)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out[f.name] = np.nanmean(arr, axis=0)
        elif isinstance(vals[0], np.ndarray):
            out[f.name] = np.mean(vals, axis=0)
        else:
            out[f.name] = float(sum(vals) / len(vals))
    return MetricsReport(**out)


def write_roc_csv(path, curves):
    """``class,threshold,fpr,tpr`` rows, classes numbered from 1."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "fpr", "tpr"])
        n = 0
        for c, curve in enumerate(curves, 1):
            for thr, f, t in zip(curve.thresholds, curve.fpr, curve.tpr):
                w.writerow([c, repr(float(thr)), repr(float(f)), repr(float(t))])
                n += 1
    return n


@dataclass
class FoldResult:
    """One cross-validation fold plus the statistics it normalized with."""

    train_split: str
    test_split: str
    train_indices: np.ndarray
    test_indices: np.ndarray
    mean_image: np.ndarray
    ol_mean: np.ndarray
    ol_std: np.ndarray
    reports: dict  # head name -> MetricsReport


def crossval_2fold(manifest, experiment_cfg, ol_features=None):
    """Train on fold1 / test on fold2, then swap.

    Returns ``(averaged, folds)`` where ``averaged`` maps each output head to
    the mean report and ``folds`` is a list of two ``FoldResult``. Mean image
    and object-level z-score statistics come from each training fold alone.
    """
    from .model import run_experiment

    folds = []
    for tr, te in (("fold1", "fold2"), ("fold2", "fold1")):
        res = run_experiment(manifest, experiment_cfg, train_split=tr, test_split=te, ol_features=ol_features)
        folds.append(FoldResult(tr, te, manifest.indices(tr), manifest.indices(te), res.mean_image,
                                res.ol_stats[0], res.ol_stats[1], res.reports))
    heads = folds[0].reports.keys()
    averaged = {h: average_reports([f.reports[h] for f in folds]) for h in heads}
    return averaged, folds
