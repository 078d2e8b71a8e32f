"""Two-phase training: teacher on hard labels, then student against the frozen teacher."""

from __future__ import annotations

import copy
import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import DatasetSplit, batches
from .losses import LossConfig, LossValue, kd_loss, supervised_loss
from .metrics import predict_probs
from .models import ModelHandle, config_hash, parameter_hash, save_checkpoint

log = logging.getLogger(__name__)


class Optimizer(str, enum.Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass(frozen=True)
class DistillConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    epochs_teacher: int = 10
    epochs_student: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: Optimizer = Optimizer.ADAM
    weight_decay: float = 0.0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        for name in ("epochs_teacher", "epochs_student", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        d["loss"]["variant"] = self.loss.variant.value
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class EpochRecord:
    epoch: int
    total: float
    supervised: float
    distill: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainingTrace:
    phase: str
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = -1.0
    teacher_hash: str | None = None

    def fingerprint(self) -> list[tuple]:
        """Everything except wall-clock time, for reproducibility checks."""
        return [(r.epoch, r.total, r.supervised, r.distill, r.val_accuracy) for r in self.records]

    def save_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"phase": self.phase, **asdict(r)}, sort_keys=True) + "\n")
        return path

    @classmethod
    def load_jsonl(cls, path) -> "TrainingTrace":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        trace = cls(phase=rows[0]["phase"] if rows else "")
        for row in rows:
            row.pop("phase")
            trace.records.append(EpochRecord(**row))
        if trace.records:
            best = max(trace.records, key=lambda r: (r.val_accuracy, -r.epoch))
            trace.best_epoch, trace.best_val_accuracy = best.epoch, best.val_accuracy
        return trace


LossFn = Callable[[np.ndarray, np.ndarray | None, np.ndarray], LossValue]


def _make_optimizer(model: torch.nn.Module, cfg: DistillConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer is Optimizer.ADAM:
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9, weight_decay=cfg.weight_decay)


def accuracy(model: ModelHandle, split: DatasetSplit) -> float:
    x, y = split.load()
    return float(np.mean(predict_probs(model, x).argmax(axis=1) == y.argmax(axis=1)))


def _check_pair(model: ModelHandle, split: DatasetSplit):
    if len(split) == 0:
        raise ValueError(f"{split.role} split is empty")
    if model.num_classes != split.num_classes:
        raise ValueError(f"model {model.name!r} outputs {model.num_classes} classes but the dataset has {split.num_classes}")


def _fit(
    model: ModelHandle,
    train: DatasetSplit,
    val: DatasetSplit | None,
    cfg: DistillConfig,
    epochs: int,
    loss_fn: LossFn,
    phase: str,
    teacher: ModelHandle | None = None,
    run_dir=None,
) -> TrainingTrace:
    if model.frozen:
        raise ValueError(f"cannot train frozen model {model.name!r}")
    _check_pair(model, train)
    val = val if val is not None and len(val) else train
    torch.manual_seed(cfg.seed)
    opt = _make_optimizer(model, cfg)
    trace = TrainingTrace(phase)
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.train()
        sums = np.zeros(3)
        n_batches = 0
        for xb, yb in batches(train, cfg.batch_size, seed=cfg.seed, epoch=epoch):
            t_logits = None
            if teacher is not None:
                with torch.no_grad():
                    t_logits = teacher(xb).double().numpy()
            logits = model(xb)
            v = loss_fn(logits.detach().double().numpy(), t_logits, yb)
            opt.zero_grad(set_to_none=True)
            logits.backward(torch.from_numpy(v.gradient).to(logits.dtype))
            opt.step()
            sums += (v.total, v.supervised_term, v.distill_term)
            n_batches += 1
        means = sums / n_batches
        val_acc = accuracy(model, val)
        rec = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]), val_acc, time.perf_counter() - t0)
        trace.records.append(rec)
        log.info("%s epoch %d loss=%.5f sup=%.5f distill=%.5f val_acc=%.4f", phase, epoch, *means, val_acc)
        if val_acc > trace.best_val_accuracy:
            trace.best_val_accuracy, trace.best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    if run_dir is not None:
        run_dir = Path(run_dir)
        trace.save_jsonl(run_dir / "trace.jsonl")
        save_checkpoint(
            model,
            run_dir / "model.ckpt",
            {"epoch": trace.best_epoch, "seed": cfg.seed, "config_hash": cfg.hash(), "phase": phase, "val_accuracy": trace.best_val_accuracy},
        )
    return trace


def train_teacher(model: ModelHandle, train: DatasetSplit, val: DatasetSplit | None, cfg: DistillConfig, run_dir=None):
    """Phase 1: plain BCE on hard labels. Returns the best-validation model and its trace."""
    trace = _fit(model, train, val, cfg, cfg.epochs_teacher, lambda s, t, y: supervised_loss(s, y, 0.0), "teacher", run_dir=run_dir)
    return model, trace


def train_student_baseline(student: ModelHandle, train: DatasetSplit, val: DatasetSplit | None, cfg: DistillConfig, run_dir=None):
    """No-teacher control arm: the supervised term of the configured objective only."""
    lc = cfg.loss
    trace = _fit(student, train, val, cfg, cfg.epochs_student, lambda s, t, y: supervised_loss(s, y, lc.gamma, lc.variant), "baseline", run_dir=run_dir)
    return student, trace


def distill_student(student: ModelHandle, teacher: ModelHandle, train: DatasetSplit, val: DatasetSplit | None, cfg: DistillConfig, run_dir=None):
    """Phase 2: per mini-batch, teacher logits (no grad), student logits, combined loss, update."""
    if not teacher.frozen:
        raise ValueError("teacher must be frozen before distillation (call models.freeze)")
    if teacher.num_classes != student.num_classes or tuple(teacher.input_shape) != tuple(student.input_shape):
        raise ValueError(
            f"teacher ({teacher.input_shape} -> {teacher.num_classes}) and student "
            f"({student.input_shape} -> {student.num_classes}) disagree on input shape or class count"
        )
    before = parameter_hash(teacher)
    lc = cfg.loss
    trace = _fit(student, train, val, cfg, cfg.epochs_student, lambda s, t, y: kd_loss(s, t, y, lc), "distill", teacher=teacher, run_dir=run_dir)
    after = parameter_hash(teacher)
    if after != before:
        raise RuntimeError("teacher parameters changed during distillation")
    trace.teacher_hash = after
    return student, trace
