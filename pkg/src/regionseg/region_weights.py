"""Combine two discriminators' decision maps into per-region loss weights.

Each region falls into one of four cases depending on which discriminators
it can fool: both (weight 2), only the first (1), only the second (1), or
neither (0). The two single-discriminator cases carry the same weight; only
the category label distinguishes them.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import torch


class RegionCase(IntEnum):
    BOTH = 0
    ONLY_1 = 1
    ONLY_2 = 2
    NONE = 3


CASE_WEIGHTS = {
    RegionCase.BOTH: 2.0,
    RegionCase.ONLY_1: 1.0,
    RegionCase.ONLY_2: 1.0,
    RegionCase.NONE: 0.0,
}


@dataclass
class CombinedDecisionMap:
    categories: torch.Tensor  # (B, h, w) values from RegionCase
    weights: torch.Tensor     # (B, h, w) values in {0, 1, 2}


def combine_decision_maps(rc1: torch.Tensor, rc2: torch.Tensor,
                          threshold: float) -> CombinedDecisionMap:
    """Elementwise four-case assignment from two decision maps (inclusive threshold)."""
    if rc1.shape != rc2.shape:
        raise ValueError(f"decision map shapes differ: {tuple(rc1.shape)} vs {tuple(rc2.shape)}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    ok1 = rc1 >= threshold
    ok2 = rc2 >= threshold
    categories = torch.full_like(rc1, RegionCase.NONE, dtype=torch.long)
    categories[ok1 & ok2] = RegionCase.BOTH
    categories[ok1 & ~ok2] = RegionCase.ONLY_1
    categories[~ok1 & ok2] = RegionCase.ONLY_2
    weights = torch.zeros_like(rc1, dtype=torch.float32)
    weights[ok1 & ok2] = CASE_WEIGHTS[RegionCase.BOTH]
    weights[ok1 ^ ok2] = CASE_WEIGHTS[RegionCase.ONLY_1]
    if categories.dim() == 4 and categories.shape[1] == 1:
        categories = categories.squeeze(1)
        weights = weights.squeeze(1)
    return CombinedDecisionMap(categories=categories, weights=weights)


def weight_mask(combined: CombinedDecisionMap, target_hw) -> torch.Tensor:
    """Nearest-neighbor replicate region weights to pixel resolution."""
    H, W = target_hw
    h, w = combined.weights.shape[-2:]
    if H % h or W % w:
        raise ValueError(f"target {target_hw} not divisible by weight map size {(h, w)}")
    return combined.weights.repeat_interleave(H // h, dim=-2).repeat_interleave(W // w, dim=-1)
