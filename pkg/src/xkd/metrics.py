"""AUC / accuracy / F1 reporting. All multi-class summaries are macro (unweighted) means."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .losses import sigmoid


def auc_one_vs_rest(scores, labels) -> float | None:
    """Mann-Whitney AUC, ties counted as half.

    Returns ``None`` (with a warning) when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined: labels contain a single class")
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_score(tp: int, fp: int, fn: int) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0 or undefined."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def confusion_matrix(true_idx, pred_idx, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_idx), np.asarray(pred_idx)), 1)
    return cm


@dataclass
class MetricReport:
    class_names: list[str]
    per_class_auc: list[float | None]
    macro_auc: float | None
    accuracy: float
    per_class_f1: list[float]
    macro_f1: float
    confusion: list[list[int]]
    n: int
    averaging: str = "macro"
    model: str = ""
    checkpoint_hash: str = ""
    config_hash: str = ""
    manifest_hash: str = ""
    split: str = "test"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        path.with_suffix(".txt").write_text(self.table())
        return path

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))

    def table(self) -> str:
        fmt = lambda v: "n/a" if v is None else f"{100 * v:6.2f}"
        lines = [
            f"# {self.model or 'model'} on {self.split} split (n={self.n}); AUC and F1 are {self.averaging} averages",
            f"{'class':<16} {'AUC':>7} {'F1':>7} {'support':>8}",
        ]
        for i, name in enumerate(self.class_names):
            lines.append(f"{name:<16} {fmt(self.per_class_auc[i]):>7} {fmt(self.per_class_f1[i]):>7} {sum(self.confusion[i]):>8}")
        lines.append(f"{'macro':<16} {fmt(self.macro_auc):>7} {fmt(self.macro_f1):>7}")
        lines.append(f"accuracy {fmt(self.accuracy)}")
        return "\n".join(lines) + "\n"


def report_from_scores(probs, labels, class_names: Sequence[str], **provenance) -> MetricReport:
    """Build a report from ``[N, C]`` class scores and one-hot (or index) labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = probs.shape
    if len(class_names) != c:
        raise ValueError(f"score width {c} does not match {len(class_names)} class names")
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    true_idx = labels.argmax(axis=1) if labels.ndim == 2 else labels.astype(np.int64)
    pred_idx = probs.argmax(axis=1)
    cm = confusion_matrix(true_idx, pred_idx, c)

    aucs: list[float | None] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for k in range(c):
            aucs.append(auc_one_vs_rest(probs[:, k], true_idx == k))
    for w in caught:
        warnings.warn(f"{w.message}")
    defined = [a for a in aucs if a is not None]

    f1s = []
    for k in range(c):
        tp = int(cm[k, k])
        f1s.append(f1_score(tp, int(cm[:, k].sum()) - tp, int(cm[k, :].sum()) - tp))

    return MetricReport(
        class_names=list(class_names),
        per_class_auc=aucs,
        macro_auc=float(np.mean(defined)) if defined else None,
        accuracy=float(np.trace(cm)) / n,
        per_class_f1=f1s,
        macro_f1=float(np.mean(f1s)),
        confusion=cm.tolist(),
        n=int(n),
        **provenance,
    )


def predict_probs(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Per-class sigmoid probabilities at temperature 1."""
    from .models import forward

    out = [forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return sigmoid(np.concatenate(out))


def evaluate(model, split, **provenance) -> MetricReport:
    if len(split) == 0:
        raise ValueError(f"cannot evaluate: {split.role} split is empty")
    if model.num_classes != split.num_classes:
        raise ValueError(f"model predicts {model.num_classes} classes but the split has {split.num_classes}")
    from .models import parameter_hash

    x, y = split.load()
    provenance.setdefault("checkpoint_hash", parameter_hash(model))
    provenance.setdefault("model", model.name)
    return report_from_scores(predict_probs(model, x), y, split.class_names, split=split.role, **provenance)


def comparison_grid(reports: dict[str, MetricReport]) -> str:
    """Markdown table with one row per labelled report (AUC / Acc / F1 in percent)."""
    fmt = lambda v: "n/a" if v is None else f"{100 * v:.1f}"
    lines = ["| model | AUC | Acc | F1 |", "|---|---:|---:|---:|"]
    for label, r in reports.items():
        lines.append(f"| {label} | {fmt(r.macro_auc)} | {fmt(r.accuracy)} | {fmt(r.macro_f1)} |")
    return "\n".join(lines) + "\n"
