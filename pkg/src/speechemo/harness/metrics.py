"""Classification metrics and the evaluation report."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def _check(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds)
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or len(y) == 0:
        raise MetricError("metrics need at least one label")
    if len(p) != len(y):
        raise MetricError(f"{len(p)} predictions for {len(y)} labels")
    return p, y


def _hard(p: np.ndarray) -> np.ndarray:
    """Class indices from either index vectors or probability rows."""
    return np.argmax(p, axis=1) if p.ndim == 2 else p.astype(np.int64)


def accuracy(preds, labels) -> float:
    p, y = _check(preds, labels)
    return float(np.mean(_hard(p) == y))


def top_k_accuracy(probs, labels, k: int) -> float:
    """Fraction whose true label is among the ``k`` highest scores.

    Ranks use a stable sort on descending score, so equal scores favour the
    lower class index.
    """
    p, y = _check(probs, labels)
    if p.ndim != 2:
        raise MetricError("top-k accuracy needs probability rows")
    if k < 1:
        raise MetricError("k must be >= 1")
    order = np.argsort(-p, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == y[:, None], axis=1)))


def confusion(preds, labels, n_classes: int | None = None) -> np.ndarray:
    """Count matrix with rows = true class, columns = predicted class."""
    p, y = _check(preds, labels)
    h = _hard(p)
    if n_classes is None:
        n_classes = p.shape[1] if p.ndim == 2 else int(max(h.max(), y.max())) + 1
    if h.min() < 0 or y.min() < 0 or h.max() >= n_classes or y.max() >= n_classes:
        raise MetricError(f"class index outside 0..{n_classes - 1}")
    return np.bincount(y * n_classes + h, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def per_class_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(precision, recall, f1)``; an undefined ratio counts as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1


def macro_f1(preds, labels, n_classes: int | None = None) -> float:
    return float(np.mean(per_class_from_confusion(confusion(preds, labels, n_classes))[2]))


@dataclass
class EvalReport:
    scheme: str
    class_names: list[str]
    n_examples: int
    accuracy: float
    top_k_accuracy: dict[int, float]
    macro_f1: float
    confusion: np.ndarray
    precision: list[float]
    recall: list[float]
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, probs, labels, class_names, scheme: str, ks=(1, 2, 3), extra=None) -> "EvalReport":
        p, y = _check(probs, labels)
        n = len(class_names)
        cm = confusion(p, y, n)
        rep = cls.from_confusion(cm, class_names, scheme, extra)
        rep.top_k_accuracy = {k: top_k_accuracy(p, y, k) for k in ks if k <= n}
        return rep

    @classmethod
    def from_confusion(cls, cm, class_names, scheme: str, extra=None) -> "EvalReport":
        """Rebuild every confusion-derived metric; top-k needs scores and is left empty."""
        cm = np.asarray(cm, dtype=np.int64)
        total = int(cm.sum())
        if total == 0:
            raise MetricError("empty confusion matrix")
        precision, recall, f1 = per_class_from_confusion(cm)
        return cls(
            scheme=scheme,
            class_names=list(class_names),
            n_examples=total,
            accuracy=float(np.trace(cm) / total),
            top_k_accuracy={},
            macro_f1=float(np.mean(f1)),
            confusion=cm,
            precision=precision.tolist(),
            recall=recall.tolist(),
            extra=dict(extra or {}),
        )

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "class_names": self.class_names,
            "n_examples": self.n_examples,
            "accuracy": self.accuracy,
            "top_k_accuracy": {str(k): v for k, v in sorted(self.top_k_accuracy.items())},
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
            "precision": self.precision,
            "recall": self.recall,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            scheme=d["scheme"],
            class_names=list(d["class_names"]),
            n_examples=int(d["n_examples"]),
            accuracy=float(d["accuracy"]),
            top_k_accuracy={int(k): float(v) for k, v in d["top_k_accuracy"].items()},
            macro_f1=float(d["macro_f1"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            precision=list(d["precision"]),
            recall=list(d["recall"]),
            extra=dict(d.get("extra", {})),
        )

    def save_json(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def save_confusion_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, self.confusion.tolist()):
                w.writerow([name, *row])

    def summary(self) -> str:
        tk = " ".join(f"top{k}={v:.4f}" for k, v in sorted(self.top_k_accuracy.items()))
        return f"{self.scheme}: n={self.n_examples} acc={self.accuracy:.4f} macroF1={self.macro_f1:.4f} {tk}".rstrip()


def load_confusion_csv(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    cm = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    return names, cm
