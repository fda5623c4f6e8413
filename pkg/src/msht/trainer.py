"""Training loop, fold orchestration, and the clinical metric set.

The optimizer is Adam with decoupled weight decay; the learning rate follows
a cosine curve from its initial value down to a tenth of it across the run.
The model parameters are persisted whenever validation accuracy strictly
improves, and every fold reports metrics from its best checkpoint.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .backbone import BackboneConfig
from .datapipe import (AugmentConfig, FoldPlan, LabeledImage, augment_train, label_index,
                       preprocess_eval, split_folds, write_manifest)
from .fgd import FgdConfig, build_variant, load_checkpoint_into, resolve_variant, save_checkpoint

POSITIVE_INDEX = label_index("positive")

FOLD_COUNT = 5


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 6e-5
    weight_decay: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    lr_final_factor: float = 0.1  # cosine decay ends at learning_rate * factor
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def cosine_lr(hp: Hyperparams, epoch: int) -> float:
    """Per-epoch learning rate; epoch 0 gives lr, the last epoch lr * factor."""
    if not 0 <= epoch < hp.epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {hp.epochs} epochs")
    if hp.epochs == 1:
        return hp.learning_rate
    floor = hp.learning_rate * hp.lr_final_factor
    progress = epoch / (hp.epochs - 1)
    return floor + (hp.learning_rate - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class ConfusionCounts(NamedTuple):
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


_METRIC_FIELDS = ("acc", "spe", "sen", "ppv", "npv", "f1")


@dataclass(frozen=True)
class MetricsReport:
    """Six clinical metrics; a zero denominator leaves the entry undefined (None)."""

    acc: float | None
    spe: float | None
    sen: float | None
    ppv: float | None
    npv: float | None
    f1: float | None

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _ratio(numerator: int, denominator: int) -> float | None:
    return numerator / denominator if denominator else None


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    if counts.total <= 0:
        raise ValueError("cannot compute metrics for zero evaluated samples")
    tp, tn, fp, fn = counts
    sen = _ratio(tp, tp + fn)
    ppv = _ratio(tp, tp + fp)
    f1 = None
    if sen is not None and ppv is not None and (sen + ppv) > 0:
        f1 = 2 * ppv * sen / (ppv + sen)
    return MetricsReport(
        acc=_ratio(tp + tn, counts.total),
        spe=_ratio(tn, tn + fp),
        sen=sen,
        ppv=ppv,
        npv=_ratio(tn, tn + fn),
        f1=f1,
    )


def evaluate(model: torch.nn.Module, inputs: torch.Tensor, labels: torch.Tensor,
             batch_size: int = 64) -> ConfusionCounts:
    """Argmax over confidences with ties counted as negative; positive = cancer."""
    if len(inputs) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    tp = tn = fp = fn = 0
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            logits = model(inputs[start:start + batch_size])
            # strict inequality: an exact tie goes to the negative class
            positive = logits[:, POSITIVE_INDEX] > logits[:, 1 - POSITIVE_INDEX]
            for pred_pos, truth in zip(positive.tolist(), labels[start:start + batch_size].tolist()):
                if truth == POSITIVE_INDEX:
                    tp += pred_pos
                    fn += not pred_pos
                else:
                    fp += pred_pos
                    tn += not pred_pos
    model.train(was_training)
    return ConfusionCounts(tp, tn, fp, fn)


class EpochLogRow(NamedTuple):
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class FoldData:
    train: list[LabeledImage]
    validation: list[LabeledImage]
    test: list[LabeledImage]


@dataclass
class FoldResults:
    fold_index: int
    best_epoch: int
    best_val_accuracy: float
    checkpoint_path: str
    train: MetricsReport
    validate: MetricsReport
    test: MetricsReport
    epoch_log: list[EpochLogRow]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


def _derive_seed(*parts: int) -> int:
    value = 0
    for part in parts:
        value = (value * 1_000_003 + int(part)) % (2 ** 31 - 1)
    return value


def _eval_tensors(images: Sequence[LabeledImage], config: AugmentConfig,
                  workers: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tensors = list(pool.map(lambda img: preprocess_eval(img, config), images))
    else:
        tensors = [preprocess_eval(img, config) for img in images]
    labels = torch.tensor([label_index(img.label) for img in images], dtype=torch.long)
    return torch.stack(tensors), labels


def _augmented_batch(images: Sequence[LabeledImage], indices: Sequence[int],
                     config: AugmentConfig, seed: int, epoch: int,
                     workers: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    # per-sample rng streams are derived from (seed, epoch, dataset index),
    # so the result is independent of batch order and worker count
    def one(index: int) -> torch.Tensor:
        return augment_train(images[index], random.Random(_derive_seed(seed, epoch, index)), config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tensors = list(pool.map(one, indices))
    else:
        tensors = [one(i) for i in indices]
    labels = torch.tensor([label_index(images[i].label) for i in indices], dtype=torch.long)
    return torch.stack(tensors), labels


def train_fold(model: torch.nn.Module, fold_data: FoldData, hp: Hyperparams,
               augment_config: AugmentConfig | None = None,
               checkpoint_path=None, log_path=None, fold_index: int = 0,
               workers: int = 0) -> FoldResults:
    """Train one fold; returns metrics computed from the best checkpoint."""
    augment_config = augment_config or AugmentConfig()
    checkpoint_path = Path(checkpoint_path) if checkpoint_path else Path(f"fold{fold_index}_best.npz")

    torch.manual_seed(_derive_seed(hp.seed, fold_index))
    optimizer = torch.optim.AdamW(model.parameters(), lr=hp.learning_rate,
                                  weight_decay=hp.weight_decay)

    train_x, train_y = _eval_tensors(fold_data.train, augment_config, workers)
    val_x, val_y = _eval_tensors(fold_data.validation, augment_config, workers)
    test_x, test_y = _eval_tensors(fold_data.test, augment_config, workers)

    best_val = -1.0
    best_epoch = -1
    epoch_log: list[EpochLogRow] = []
    n_train = len(fold_data.train)

    for epoch in range(hp.epochs):
        lr = cosine_lr(hp, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = list(range(n_train))
        random.Random(_derive_seed(hp.seed, fold_index, epoch)).shuffle(order)

        model.train()
        losses = []
        for batch_index, start in enumerate(range(0, n_train, hp.batch_size)):
            indices = order[start:start + hp.batch_size]
            batch_x, batch_y = _augmented_batch(fold_data.train, indices, augment_config,
                                                hp.seed, epoch, workers)
            logits = model(batch_x)
            loss = F.cross_entropy(logits, batch_y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, batch_index)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        train_acc = compute_metrics(evaluate(model, train_x, train_y)).acc
        val_acc = compute_metrics(evaluate(model, val_x, val_y)).acc
        epoch_log.append(EpochLogRow(epoch, lr, sum(losses) / len(losses), train_acc, val_acc))

        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            save_checkpoint(checkpoint_path, model,
                            {"fold": fold_index, "epoch": epoch, "val_accuracy": val_acc})

    if log_path:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(("epoch", "lr", "train_loss", "train_acc", "val_acc"))
            writer.writerows(epoch_log)

    load_checkpoint_into(model, checkpoint_path)
    return FoldResults(
        fold_index=fold_index,
        best_epoch=best_epoch,
        best_val_accuracy=best_val,
        checkpoint_path=str(checkpoint_path),
        train=compute_metrics(evaluate(model, train_x, train_y)),
        validate=compute_metrics(evaluate(model, val_x, val_y)),
        test=compute_metrics(evaluate(model, test_x, test_y)),
        epoch_log=epoch_log,
    )


def aggregate_folds(results: Sequence[FoldResults]) -> dict:
    """Arithmetic mean of each defined metric per split, with exclusion counts."""
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    summary: dict = {}
    for split in ("train", "validate", "test"):
        entry: dict = {}
        excluded: dict = {}
        for field in _METRIC_FIELDS:
            values = [getattr(getattr(r, split), field) for r in results]
            defined = [v for v in values if v is not None]
            entry[field] = sum(defined) / len(defined) if defined else None
            if len(defined) != len(values):
                excluded[field] = len(values) - len(defined)
        entry["excluded"] = excluded
        summary[split] = entry
    return summary


def run_experiment(variant: str, images: Sequence[LabeledImage], hp: Hyperparams,
                   seed: int, out_dir, backbone_config: BackboneConfig | None = None,
                   fgd_config: FgdConfig | None = None,
                   augment_config: AugmentConfig | None = None,
                   workers: int = 0) -> dict:
    """Run the full 5-fold protocol for one variant and write its report.

    Everything is reproducible from (variant, seed, hp): the fold plan, the
    per-fold model seeds, the augmentation streams, and the report content.
    """
    variant = resolve_variant(variant)  # fail fast, before any training
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_id = {img.source_id: img for img in images}
    plan = split_folds(list(by_id), seed, labels={i: img.label for i, img in by_id.items()})

    fold_of = {i: "test" for i in plan.test_ids}
    for k, fold in enumerate(plan.folds):
        fold_of.update({i: str(k) for i in fold})
    write_manifest(out_dir / "manifest.csv",
                   [(i, by_id[i].path, by_id[i].label, fold_of[i]) for i in sorted(by_id)])

    test_images = [by_id[i] for i in plan.test_ids]
    results = []
    for k in range(FOLD_COUNT):
        fold_seed = _derive_seed(seed, k)
        model = build_variant(variant, backbone_config, fgd_config, init_seed=fold_seed)
        fold_data = FoldData(
            train=[by_id[i] for i in plan.train_ids(k)],
            validation=[by_id[i] for i in plan.validation_ids(k)],
            test=test_images,
        )
        results.append(train_fold(
            model, fold_data, dataclasses.replace(hp, seed=fold_seed), augment_config,
            checkpoint_path=out_dir / f"fold{k}_best.npz",
            log_path=out_dir / f"fold{k}_log.csv",
            fold_index=k, workers=workers))

    report = {
        "variant": variant,
        "seed": seed,
        "hyperparams": dataclasses.asdict(hp),
        "per_fold": [
            {
                "fold": r.fold_index,
                "best_epoch": r.best_epoch,
                "best_validation_accuracy": r.best_val_accuracy,
                "checkpoint": Path(r.checkpoint_path).name,
                "train": r.train.as_dict(),
                "validate": r.validate.as_dict(),
                "test": r.test.as_dict(),
            }
            for r in results
        ],
        "aggregate": aggregate_folds(results),
    }
    with open(out_dir / "report.json", "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return report
