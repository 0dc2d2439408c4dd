"""Evaluation metrics and report emission.

Top-k accuracy, confusion matrices, macro precision/recall/F1 on the 82
leaf classes, hierarchy rollups to levels 1/2, and file emission:
metrics.json, confusion.csv, a comparison table (model, top-1 %, top-5 %,
precision, recall, f1) and accuracy/loss training-curve figures.

Precision/recall/F1 averaging is macro (unweighted over classes with
nonzero support); the emitted report header records this.
"""

import json
import os
from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataset import HierarchyTable

N_CLASSES = 82

TABLE_HEADER = "Used Model, Top-1 Accuracy (%), Top-5 (%), Precision, Recall, F1-Score"


def _ranked_predictions(logits):
    """Class ids per row, best first; ties broken by lower class index."""
    logits = np.asarray(logits, dtype=np.float64)
    return np.argsort(-logits, axis=1, kind="stable")


def topk_accuracy(logits, labels, k) -> float:
    """Fraction of rows whose true label is among the k highest logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if not 1 <= k <= n_classes:
        raise ValueError(f"k must be in [1, {n_classes}], got {k}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must be in [0, {n_classes})")
    ranked = _ranked_predictions(logits)[:, :k]
    hits = (ranked == labels[:, None]).any(axis=1)
    return float(hits.mean())


def confusion_matrix(true_ids, pred_ids, n_classes=N_CLASSES):
    """Entry (i, j) counts samples with true class i predicted as j."""
    true_ids = np.asarray(true_ids)
    pred_ids = np.asarray(pred_ids)
    for name, ids in (("true", true_ids), ("pred", pred_ids)):
        if len(ids) and (ids.min() < 0 or ids.max() >= n_classes):
            raise ValueError(f"{name} ids must be in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true_ids, pred_ids), 1)
    return cm


def per_class_prf(cm):
    """Per-class precision, recall, f1 and support from a confusion matrix.

    Zero-denominator classes contribute 0; f1 is 0 when precision and
    recall are both 0.
    """
    cm = np.asarray(cm)
    diag = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom,
                   out=np.zeros_like(diag), where=denom > 0)
    return precision, recall, f1, row.astype(np.int64)


def macro_prf(cm):
    """Unweighted macro (precision, recall, f1) over classes with support.

    Returns (precision, recall, f1, n_excluded) where n_excluded counts the
    zero-support classes left out of the average.
    """
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise ValueError("confusion matrix is all zero")
    precision, recall, f1, support = per_class_prf(cm)
    keep = support > 0
    n_excluded = int((~keep).sum())
    return (float(precision[keep].mean()), float(recall[keep].mean()),
            float(f1[keep].mean()), n_excluded)


def rollup_level(true_l3, pred_l3, hierarchy: HierarchyTable, level):
    """Map leaf ids through the parent chain and recompute the confusion."""
    mapper = np.vectorize(lambda l3: hierarchy.parent(int(l3), level))
    true_up = mapper(np.asarray(true_l3))
    pred_up = mapper(np.asarray(pred_l3))
    n = max(int(true_up.max()), int(pred_up.max())) + 1
    return confusion_matrix(true_up, pred_up, n_classes=n)


@dataclass
class MetricsReport:
    top1: float
    top5: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    excluded_classes: int
    per_class: list                      # rows of (precision, recall, f1, support)
    confusion: np.ndarray
    per_level: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    model_name: str = "model"

    def to_dict(self):
        return {
            "model_name": self.model_name,
            "averaging": "macro",  # headline values; weighted kept alongside
            "top1": self.top1, "top5": self.top5,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "excluded_classes": self.excluded_classes,
            "weighted": self.weighted,
            "per_class": [list(row) for row in self.per_class],
            "confusion": self.confusion.tolist(),
            "per_level": self.per_level,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(top1=d["top1"], top5=d["top5"],
                   macro_precision=d["macro_precision"],
                   macro_recall=d["macro_recall"], macro_f1=d["macro_f1"],
                   excluded_classes=d["excluded_classes"],
                   per_class=[tuple(row) for row in d["per_class"]],
                   confusion=np.asarray(d["confusion"], dtype=np.int64),
                   per_level={k: dict(v) for k, v in d.get("per_level", {}).items()},
                   weighted=dict(d.get("weighted", {})),
                   model_name=d.get("model_name", "model"))

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (self.to_dict() == other.to_dict()
                and np.array_equal(self.confusion, other.confusion))


def build_report(logits, labels, hierarchy: HierarchyTable = None,
                 model_name="model") -> MetricsReport:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    pred = _ranked_predictions(logits)[:, 0]
    cm = confusion_matrix(labels, pred, n_classes=n_classes)
    precision, recall, f1, support = per_class_prf(cm)
    macro_p, macro_r, macro_f1, excluded = macro_prf(cm)
    weights = support / support.sum()
    weighted = {"precision": float((precision * weights).sum()),
                "recall": float((recall * weights).sum()),
                "f1": float((f1 * weights).sum())}
    per_level = {}
    if hierarchy is not None:
        for level in (1, 2):
            cm_up = rollup_level(labels, pred, hierarchy, level)
            p, r, f, _ = macro_prf(cm_up)
            per_level[str(level)] = {
                "top1": float(np.diag(cm_up).sum() / cm_up.sum()),
                "macro_precision": p, "macro_recall": r, "macro_f1": f,
            }
    return MetricsReport(
        top1=topk_accuracy(logits, labels, 1),
        top5=topk_accuracy(logits, labels, min(5, n_classes)),
        macro_precision=macro_p, macro_recall=macro_r, macro_f1=macro_f1,
        excluded_classes=excluded,
        per_class=[(float(precision[i]), float(recall[i]), float(f1[i]),
                    int(support[i])) for i in range(n_classes)],
        confusion=cm, per_level=per_level, weighted=weighted,
        model_name=model_name)


def format_table_row(name, top1, top5, precision, recall, f1) -> str:
    """One comparison-table row: integer percents, two-decimal PRF."""
    return (f"{name}, {round(top1 * 100)}, {round(top5 * 100)}, "
            f"{precision:.2f}, {recall:.2f}, {f1:.2f}")


def _plot_curves(history, outdir):
    epochs = [r.epoch for r in history.records]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(epochs, [r.train_top1 for r in history.records], label="train")
    ax.plot(epochs, [r.val_top1 for r in history.records], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "accuracy.png"), dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(epochs, [r.train_loss for r in history.records], label="train")
    ax.plot(epochs, [r.val_loss for r in history.records], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "loss.png"), dpi=120)
    plt.close(fig)


def emit_report(report: MetricsReport, history, outdir):
    """Write metrics.json, confusion.csv, table.txt and curve figures.

    An empty or missing history omits the curves with a notice; metrics are
    written regardless. Returns the list of files written.
    """
    os.makedirs(outdir, exist_ok=True)
    written = []

    metrics_path = os.path.join(outdir, "metrics.json")
    with open(metrics_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    written.append(metrics_path)

    confusion_path = os.path.join(outdir, "confusion.csv")
    np.savetxt(confusion_path, report.confusion, fmt="%d", delimiter=",")
    written.append(confusion_path)

    table_path = os.path.join(outdir, "table.txt")
    with open(table_path, "w") as fh:
        fh.write(TABLE_HEADER + "\n")
        fh.write(format_table_row(report.model_name, report.top1, report.top5,
                                  report.macro_precision, report.macro_recall,
                                  report.macro_f1) + "\n")
    written.append(table_path)

    if history is not None and history.records:
        _plot_curves(history, outdir)
        written += [os.path.join(outdir, "accuracy.png"),
                    os.path.join(outdir, "loss.png")]
    else:
        notice = os.path.join(outdir, "curves_omitted.txt")
        with open(notice, "w") as fh:
            fh.write("no epoch history available; curve figures omitted\n")
        written.append(notice)
    return written


def load_metrics(path) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.from_dict(json.load(fh))


def comparison_table(metric_files) -> str:
    """Aggregate several stored metric records into one comparison table."""
    lines = [TABLE_HEADER]
    for path in metric_files:
        r = load_metrics(path)
        lines.append(format_table_row(r.model_name, r.top1, r.top5,
                                      r.macro_precision, r.macro_recall,
                                      r.macro_f1))
    return "\n".join(lines) + "\n"
