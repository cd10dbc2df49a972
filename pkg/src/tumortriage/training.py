"""Mini-batch SGD training, slide-level k-fold cross-validation and holdout
evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .augment import AugmentConfig, augment, augment_stream
from .errors import DataInvariantError, NumericError
from .metrics import accuracy, format_mean_std, mean_std, roc_curve
from .nn.model import ModelGraph, SgdConfig, SgdOptimizer, softmax, softmax_cross_entropy
from .patcher import FoldAssignment, PatchLabel
from .zoo import ArchitectureId, build

log = logging.getLogger(__name__)


def to_input(pixels: np.ndarray) -> np.ndarray:
    """RGB8 patches -> float32 network input scaled to [-1, 1]."""
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


@dataclass
class PatchDataset:
    pixels: np.ndarray        # (N, S, S, 3) uint8
    labels: np.ndarray        # (N,) binary targets
    slide_ids: np.ndarray     # (N,) str
    patch_labels: list        # three-way provenance

    @classmethod
    def from_patches(cls, patches: list) -> "PatchDataset":
        if not patches:
            raise DataInvariantError("empty patch set")
        return cls(np.stack([p.pixels for p in patches]),
                   np.array([p.label.binary for p in patches], dtype=np.int64),
                   np.array([p.slide_id for p in patches]),
                   [p.label for p in patches])

    def __len__(self):
        return len(self.labels)

    def subset(self, mask: np.ndarray) -> "PatchDataset":
        idx = np.flatnonzero(mask)
        return PatchDataset(self.pixels[idx], self.labels[idx], self.slide_ids[idx],
                            [self.patch_labels[i] for i in idx])

    def label_counts(self) -> dict:
        return {k.value: sum(1 for p in self.patch_labels if p is k) for k in PatchLabel}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: Optional[float] = None


@dataclass
class TrainRun:
    arch: str
    sgd: SgdConfig
    augment: Optional[AugmentConfig]
    fold: Optional[int]
    seed: int
    epochs: list = field(default_factory=list)
    checkpoint: Optional[str] = None
    model: Optional[ModelGraph] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "sgd": asdict(self.sgd),
            "augment": asdict(self.augment) if self.augment else None,
            "fold": self.fold,
            "seed": self.seed,
            "epochs": [asdict(e) for e in self.epochs],
            "checkpoint": self.checkpoint,
        }


def predict_scores(model: ModelGraph, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Positive-tumor probability for each patch."""
    out = [model.predict_proba(to_input(pixels[i:i + batch_size]))
           for i in range(0, len(pixels), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.float32)


def _augment_batch(batch: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    return np.stack([augment(p, config, rng) for p in batch])


def train(data: PatchDataset, arch, sgd: SgdConfig, augment_config: Optional[AugmentConfig] = None,
          val: Optional[PatchDataset] = None, fold: Optional[int] = None,
          model: Optional[ModelGraph] = None) -> TrainRun:
    """Train one model. Deterministic for a fixed ``sgd.seed`` and BLAS thread count."""
    arch = ArchitectureId(arch)
    if len(np.unique(data.labels)) < 2:
        raise DataInvariantError("training set contains a single class")
    size = data.pixels.shape[1]
    seeds = np.random.SeedSequence(sgd.seed).spawn(2)
    if model is None:
        model = build(arch, size, seed=int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    aug_rng = augment_stream(augment_config.seed, 0) if augment_config else None
    optimizer = SgdOptimizer(sgd)
    run = TrainRun(arch.value, sgd, augment_config, fold, sgd.seed, model=model)
    n = len(data)
    for epoch in range(1, sgd.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        try:
            for start in range(0, n, sgd.batch_size):
                idx = order[start:start + sgd.batch_size]
                batch = data.pixels[idx]
                if aug_rng is not None:
                    batch = _augment_batch(batch, augment_config, aug_rng)
                logits, caches = model.forward_train(to_input(batch))
                loss, dlogits = softmax_cross_entropy(logits, data.labels[idx])
                grads, _ = model.backward(caches, dlogits)
                optimizer.step(model, grads)
                loss_sum += loss * len(idx)
                correct += int(np.count_nonzero(logits.argmax(axis=1) == data.labels[idx]))
        except NumericError as exc:
            raise NumericError(f"training diverged in epoch {epoch}: {exc}") from exc
        record = EpochRecord(epoch, loss_sum / n, correct / n)
        if val is not None:
            record.val_acc = evaluate_accuracy(model, val)
        run.epochs.append(record)
        log.info("%s fold=%s epoch %d loss=%.4f acc=%.3f val=%s", arch.value, fold, epoch,
                 record.train_loss, record.train_acc, record.val_acc)
    return run


def evaluate_accuracy(model: ModelGraph, data: PatchDataset) -> float:
    scores = predict_scores(model, data.pixels)
    return accuracy((scores >= 0.5).astype(np.int64), data.labels)


@dataclass
class CvReport:
    k: int
    arch: str
    train_acc: list
    val_acc: list
    runs: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        tm, ts = mean_std(self.train_acc)
        vm, vs = mean_std(self.val_acc)
        return {"train_mean": tm, "train_std": ts, "val_mean": vm, "val_std": vs,
                "train": format_mean_std(self.train_acc), "val": format_mean_std(self.val_acc)}

    def to_dict(self) -> dict:
        return {"k": self.k, "arch": self.arch, "train_acc": self.train_acc,
                "val_acc": self.val_acc, "summary": self.summary(),
                "runs": [r.to_dict() for r in self.runs]}


def cross_validate(data: PatchDataset, folds: FoldAssignment, arch, sgd: SgdConfig,
                   augment_config: Optional[AugmentConfig] = None) -> CvReport:
    """Train on slides outside fold f, validate on slides inside it, for every f."""
    arch = ArchitectureId(arch)
    unknown = set(data.slide_ids.tolist()) - set(folds.folds)
    if unknown:
        raise DataInvariantError(f"patches from slides without a fold: {sorted(unknown)[:3]}")
    fold_of = np.array([folds.folds[s] for s in data.slide_ids])
    runs, train_acc, val_acc = [], [], []
    for f in range(folds.k):
        tr, va = data.subset(fold_of != f), data.subset(fold_of == f)
        leaked = set(tr.slide_ids.tolist()) & set(va.slide_ids.tolist())
        if leaked:
            raise DataInvariantError(f"fold {f}: slides in both train and validation: {leaked}")
        if len(va) == 0:
            raise DataInvariantError(f"fold {f} has no validation patches")
        fold_sgd = SgdConfig(sgd.learning_rate, sgd.momentum, sgd.batch_size, sgd.epochs,
                             sgd.seed + f)
        run = train(tr, arch, fold_sgd, augment_config, val=va, fold=f)
        runs.append(run)
        train_acc.append(run.epochs[-1].train_acc)
        val_acc.append(run.epochs[-1].val_acc)
    return CvReport(folds.k, arch.value, train_acc, val_acc, runs)


def evaluate_holdout(model: ModelGraph, data: PatchDataset, n_boot: int = 1000,
                     seed: int = 0) -> dict:
    """Accuracy plus ROC/AUC with a bootstrap CI on an independent patch set."""
    scores = predict_scores(model, data.pixels)
    acc = accuracy((scores >= 0.5).astype(np.int64), data.labels)
    curve = roc_curve(scores, data.labels, ci=True, n_boot=n_boot, seed=seed)
    return {"accuracy": acc, "auc": curve.auc, "auc_ci": [curve.ci_low, curve.ci_high],
            "n": int(len(data)), "n_positive": int(data.labels.sum()), "roc": curve,
            "scores": scores}


def augmentation_table(data: PatchDataset, folds: FoldAssignment, arch, sgd: SgdConfig,
                       augment_config: AugmentConfig, baseline: Optional[CvReport] = None) -> dict:
    """Train/validation accuracy with augmentation off and on (2 x 2 table)."""
    off = baseline or cross_validate(data, folds, arch, sgd, None)
    on = cross_validate(data, folds, arch, sgd, augment_config)
    return {"off": {"train": off.summary()["train_mean"], "val": off.summary()["val_mean"],
                    "report": off},
            "on": {"train": on.summary()["train_mean"], "val": on.summary()["val_mean"],
                   "report": on}}


def logits_to_proba(logits: np.ndarray) -> np.ndarray:
    return softmax(logits)[:, 1]
