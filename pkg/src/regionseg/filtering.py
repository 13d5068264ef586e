"""Local pseudo-label filtering: turn discriminator verdicts into pixel selections.

A decision map scores each 16x16 region of a prediction in [0, 1]. Regions
at or above the selection threshold are upsampled to a pixel-level filter
mask; pseudo-labels survive only where the mask is true, everything else
becomes IGNORE.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .common import IGNORE_LABEL


def to_prediction_label(prediction_map: torch.Tensor) -> torch.Tensor:
    """Argmax over the channel axis; ties break toward the lowest class index."""
    if prediction_map.dim() != 4 or prediction_map.shape[1] < 2:
        raise ValueError(f"expected (B, C>=2, H, W), got {tuple(prediction_map.shape)}")
    return prediction_map.argmax(dim=1)


def upsample_decision(rc: torch.Tensor, target_hw, threshold: float) -> torch.Tensor:
    """Replicate the decision map to image size, then threshold (inclusive).

    Nearest-neighbor replication keeps each region's verdict block-constant,
    so every pixel inherits exactly one region's decision.
    """
    if rc.dim() != 4 or rc.shape[1] != 1:
        raise ValueError(f"expected (B, 1, h, w) decision map, got {tuple(rc.shape)}")
    H, W = target_hw
    h, w = rc.shape[-2:]
    if H % h or W % w:
        raise ValueError(f"target {target_hw} not divisible by decision map size {(h, w)}")
    up = rc.repeat_interleave(H // h, dim=2).repeat_interleave(W // w, dim=3)
    return (up >= threshold).squeeze(1)


def select_pseudo_labels(prediction_label: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Keep labels where the filter mask is true, IGNORE elsewhere."""
    if prediction_label.shape != mask.shape:
        raise ValueError(
            f"label shape {tuple(prediction_label.shape)} != mask shape {tuple(mask.shape)}"
        )
    return torch.where(mask, prediction_label,
                       torch.full_like(prediction_label, IGNORE_LABEL))


def onehot_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, H, W) labels -> (B, C, H, W) one-hot; IGNORE pixels become all-zero."""
    valid = labels != IGNORE_LABEL
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    onehot = F.one_hot(safe.long(), num_classes).permute(0, 3, 1, 2).float()
    return onehot * valid.unsqueeze(1)


def make_concat(images: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Channel-concatenate image (first) and per-pixel class probabilities."""
    if images.shape[0] != probs.shape[0] or images.shape[-2:] != probs.shape[-2:]:
        raise ValueError(
            f"image shape {tuple(images.shape)} incompatible with "
            f"probability shape {tuple(probs.shape)}"
        )
    return torch.cat([images, probs], dim=1)
