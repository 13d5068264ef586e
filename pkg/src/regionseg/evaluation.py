"""mIoU evaluation and two-branch ensembling inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .common import IGNORE_LABEL, ConfigurationError


@dataclass(frozen=True)
class EnsembleConfig:
    w1: float = 0.5
    w2: float = 0.5

    def validate(self):
        if self.w1 < 0 or self.w2 < 0 or abs(self.w1 + self.w2 - 1.0) > 1e-6:
            raise ConfigurationError(
                f"ensemble weights must be nonnegative and sum to 1, got "
                f"({self.w1}, {self.w2})"
            )


def ensemble_predict(probs_1: torch.Tensor, probs_2: torch.Tensor,
                     cfg: EnsembleConfig = EnsembleConfig()):
    """Weighted average of the two probability maps and its argmax."""
    cfg.validate()
    if probs_1.shape != probs_2.shape:
        raise ValueError(f"shape mismatch: {tuple(probs_1.shape)} vs {tuple(probs_2.shape)}")
    averaged = cfg.w1 * probs_1 + cfg.w2 * probs_2
    return averaged, averaged.argmax(dim=1)


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def update_confusion(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Accumulate counts[gt, pred] over non-ignored pixels, in place."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    num_classes = cm.shape[0]
    keep = gt != IGNORE_LABEL
    pred, gt = pred[keep], gt[keep]
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError(f"prediction values outside [0, {num_classes})")
    if gt.size and (gt.min() < 0 or gt.max() >= num_classes):
        raise ValueError(f"ground-truth values outside [0, {num_classes})")
    counts = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
    cm += counts.reshape(num_classes, num_classes)
    return cm


def per_class_iou(cm: np.ndarray) -> dict:
    """{class: IoU} for every class with nonzero union."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=1) + cm.sum(axis=0) - np.diag(cm)
    return {int(c): float(inter[c] / union[c]) for c in range(cm.shape[0]) if union[c] > 0}


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes with nonzero union."""
    ious = per_class_iou(cm)
    if not ious:
        raise ValueError("mIoU undefined: every class has zero union")
    return float(np.mean(list(ious.values())))


def pixel_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.diag(cm).sum() / total) if total else 0.0


def predict_probs(branch, images: torch.Tensor) -> torch.Tensor:
    """Softmax probability map for a batch, without tracking gradients."""
    was_training = branch.training
    branch.eval()
    try:
        with torch.no_grad():
            return torch.softmax(branch(images), dim=1)
    finally:
        branch.train(was_training)


def _batched(samples, batch_size: int = 8):
    """Group consecutive samples of equal spatial size into batches."""
    bucket = []
    for s in samples:
        if bucket and (len(bucket) >= batch_size or bucket[-1].label.shape != s.label.shape):
            yield bucket
            bucket = []
        bucket.append(s)
    if bucket:
        yield bucket


def evaluate(branch_1, branch_2, samples, num_classes: int, eni: bool,
             ensemble: EnsembleConfig = EnsembleConfig()) -> dict:
    """mIoU report over a dataset; eni=False scores branch 1 alone."""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("cannot evaluate an empty dataset")
    cm = new_confusion(num_classes)
    for bucket in _batched(samples):
        images = torch.from_numpy(
            np.stack([s.image.transpose(2, 0, 1) for s in bucket]))
        probs_1 = predict_probs(branch_1, images)
        if eni:
            _, pred = ensemble_predict(probs_1, predict_probs(branch_2, images), ensemble)
        else:
            pred = probs_1.argmax(dim=1)
        gt = np.stack([s.label for s in bucket])
        update_confusion(cm, pred.numpy(), gt)
    return {
        "miou": miou(cm),
        "per_class_iou": per_class_iou(cm),
        "pixel_accuracy": pixel_accuracy(cm),
    }


def evaluate_both(branch_1, branch_2, samples, num_classes: int,
                  ensemble: EnsembleConfig = EnsembleConfig()) -> dict:
    """Evaluate ensembled and branch-1-only predictions in one pass."""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("cannot evaluate an empty dataset")
    cm_single = new_confusion(num_classes)
    cm_ens = new_confusion(num_classes)
    for bucket in _batched(samples):
        images = torch.from_numpy(
            np.stack([s.image.transpose(2, 0, 1) for s in bucket]))
        probs_1 = predict_probs(branch_1, images)
        probs_2 = predict_probs(branch_2, images)
        _, pred_ens = ensemble_predict(probs_1, probs_2, ensemble)
        gt = np.stack([s.label for s in bucket])
        update_confusion(cm_single, probs_1.argmax(dim=1).numpy(), gt)
        update_confusion(cm_ens, pred_ens.numpy(), gt)
    return {
        "eni_off": {"miou": miou(cm_single), "per_class_iou": per_class_iou(cm_single),
                    "pixel_accuracy": pixel_accuracy(cm_single)},
        "eni_on": {"miou": miou(cm_ens), "per_class_iou": per_class_iou(cm_ens),
                   "pixel_accuracy": pixel_accuracy(cm_ens)},
    }
