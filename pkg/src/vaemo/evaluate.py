"""Classification/regression heads, metrics, and fold aggregation.

UAR is the mean of per-class recalls over classes that actually occur in
the labels; WAR is plain accuracy.  Cross-validation pools predictions
across folds and computes metrics once on the concatenation, never by
averaging per-fold values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericError, ParameterError, ShapeError
from .params import ParamStore

TASKS = ("categorical", "dimensional")


def head_logits(pooled: Tensor, store: ParamStore) -> Tensor:
    """Single dense layer over the pooled fused representation."""
    return ad.add(ad.matmul(pooled, store["head.cls.weight"]), store["head.cls.bias"])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy expects [N, K] logits with [N] labels, got {logits.shape} and {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(
            f"label values outside [0, {logits.shape[1]}) for a {logits.shape[1]}-way head"
        )
    return ad.tensor_mean(ad.log_sum_exp(logits, axis=1) - ad.pick(logits, labels))


def task_loss(outputs: Tensor, targets: np.ndarray, task: str) -> Tensor:
    if task == "categorical":
        return cross_entropy(outputs, targets)
    if task == "dimensional":
        targets = np.asarray(targets, dtype=outputs.data.dtype)
        if outputs.shape != targets.shape:
            raise DataError(
                f"dimensional targets {targets.shape} do not match outputs {outputs.shape}"
            )
        return ad.mse(outputs, Tensor(targets))
    raise ParameterError(f"unknown task {task!r}; expected one of {TASKS}")


def predict_classes(logits: np.ndarray) -> np.ndarray:
    # np.argmax takes the first maximum, i.e. ties break toward low index.
    return np.argmax(logits, axis=1)


def uar(preds: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted average recall over classes present in the labels."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ShapeError(f"preds {preds.shape} and labels {labels.shape} must be matching vectors")
    if labels.size == 0:
        raise ParameterError("uar needs at least one prediction")
    recalls = [
        float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)
    ]
    return float(np.mean(recalls))


def war(preds: np.ndarray, labels: np.ndarray) -> float:
    """Weighted average recall, i.e. overall accuracy."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ShapeError(f"preds {preds.shape} and labels {labels.shape} must be matching vectors")
    if labels.size == 0:
        raise ParameterError("war needs at least one prediction")
    return float(np.mean(preds == labels))


def pcc(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; constant inputs have no defined correlation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ParameterError(f"pcc needs two matching vectors of length >= 2, got {x.shape}, {y.shape}")
    xm = x - x.mean()
    ym = y - y.mean()
    denom = np.sqrt((xm * xm).sum() * (ym * ym).sum())
    if denom == 0.0:
        raise NumericError("pcc is undefined for constant input")
    return float((xm * ym).sum() / denom)


@dataclass
class FoldResult:
    fold: int
    sample_ids: list[str]
    labels: np.ndarray
    preds: np.ndarray  # class predictions, or [n, 3] regression outputs
    task: str = "categorical"


@dataclass
class EvalReport:
    task: str
    per_fold: list[dict]
    pooled_labels: np.ndarray
    pooled_preds: np.ndarray
    uar: float | None = None
    war: float | None = None
    pcc_per_dim: list[float] | None = None
    per_class_recall: dict[int, float] = field(default_factory=dict)
    confusion: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        out = {
            "task": self.task,
            "per_fold": self.per_fold,
            "uar": self.uar,
            "war": self.war,
            "pcc_per_dim": self.pcc_per_dim,
            "per_class_recall": {str(k): v for k, v in self.per_class_recall.items()},
        }
        if self.confusion is not None:
            out["confusion"] = self.confusion.tolist()
        return out


def aggregate_folds(folds: list[FoldResult]) -> EvalReport:
    """Concatenate fold predictions, then compute metrics once."""
    if not folds:
        raise ParameterError("aggregate_folds needs at least one fold")
    task = folds[0].task
    seen: dict[str, int] = {}
    for fr in folds:
        if fr.task != task:
            raise DataError(f"fold {fr.fold} task {fr.task!r} differs from {task!r}")
        for sid in fr.sample_ids:
            if sid in seen:
                raise DataError(
                    f"sample {sid!r} appears in folds {seen[sid]} and {fr.fold}"
                )
            seen[sid] = fr.fold
    labels = np.concatenate([fr.labels for fr in folds])
    preds = np.concatenate([fr.preds for fr in folds])

    per_fold = []
    report = EvalReport(task=task, per_fold=per_fold, pooled_labels=labels, pooled_preds=preds)
    if task == "categorical":
        for fr in folds:
            per_fold.append(
                {"fold": fr.fold, "n": len(fr.labels), "uar": uar(fr.preds, fr.labels), "war": war(fr.preds, fr.labels)}
            )
        report.uar = uar(preds, labels)
        report.war = war(preds, labels)
        classes = np.unique(labels)
        report.per_class_recall = {
            int(c): float(np.mean(preds[labels == c] == c)) for c in classes
        }
        k = int(classes.max()) + 1
        confusion = np.zeros((k, k), dtype=np.int64)
        for y, p in zip(labels, preds):
            confusion[int(y), int(p)] += 1
        report.confusion = confusion
    else:
        for fr in folds:
            per_fold.append(
                {
                    "fold": fr.fold,
                    "n": len(fr.labels),
                    "pcc_per_dim": [pcc(fr.preds[:, d], fr.labels[:, d]) for d in range(fr.labels.shape[1])],
                }
            )
        report.pcc_per_dim = [
            pcc(preds[:, d], labels[:, d]) for d in range(labels.shape[1])
        ]
    return report
