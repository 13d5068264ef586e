"""Training objectives: supervised, cross pseudo supervision, local selection,
dynamic region, feature matching, and the discriminators' adversarial loss.

All pixel losses share one kernel, ``masked_ce``, which averages weighted
cross entropy over the *selected* pixels (weight > 0, label != IGNORE) so
loss magnitude stays comparable as the selected fraction varies.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .common import IGNORE_LABEL, NumericsError
from .filtering import upsample_decision
from .region_weights import combine_decision_maps, weight_mask

SCORE_CLAMP = 1e-7


@dataclass
class LossWeights:
    """Weights of the total objective and the region selection threshold.

    lambda_cps scales cross pseudo supervision, lambda_region the local
    selection (or dynamic region) term, lambda_feature the feature matching
    term. ``threshold`` is the decision-map selection cutoff.
    """

    lambda_cps: float = 1.0
    lambda_region: float = 1.0
    lambda_feature: float = 0.1
    threshold: float = 0.6
    drlc_enabled: bool = False

    @classmethod
    def voc_profile(cls, drlc_enabled: bool = False) -> "LossWeights":
        return cls(lambda_cps=1.0, lambda_region=1.0, lambda_feature=0.1,
                   threshold=0.6, drlc_enabled=drlc_enabled)

    @classmethod
    def cityscapes_profile(cls, drlc_enabled: bool = False) -> "LossWeights":
        return cls(lambda_cps=5.0, lambda_region=1.0, lambda_feature=0.1,
                   threshold=0.7, drlc_enabled=drlc_enabled)

    def validate(self):
        for name in ("lambda_cps", "lambda_region", "lambda_feature"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class LossReport:
    sup: float
    cps: float
    ls_or_dr: float
    fm: float
    total: float
    selected_fraction: float

    def to_record(self, iteration: int, **extra) -> dict:
        rec = {
            "iteration": iteration,
            "sup": self.sup,
            "cps": self.cps,
            "ls_or_dr": self.ls_or_dr,
            "fm": self.fm,
            "total": self.total,
            "selected_fraction": self.selected_fraction,
        }
        rec.update(extra)
        return rec


def _check_finite(name: str, t: torch.Tensor):
    if torch.isnan(t).any():
        raise NumericsError(f"NaN detected in {name}")


def masked_ce(logits: torch.Tensor, target: torch.Tensor,
              pixel_weight: torch.Tensor) -> torch.Tensor:
    """Weighted cross entropy averaged over selected pixels.

    Selected means weight > 0 and target != IGNORE. Returns exactly 0 when
    nothing is selected.
    """
    _check_finite("logits", logits)
    selected = (target != IGNORE_LABEL) & (pixel_weight > 0)
    if not torch.any(selected):
        return logits.new_zeros(())
    ce = F.cross_entropy(logits, target.long(), ignore_index=IGNORE_LABEL,
                         reduction="none")
    return (ce * pixel_weight)[selected].sum() / selected.sum()


def local_selection_loss(logits: torch.Tensor, rc: torch.Tensor,
                         threshold: float) -> torch.Tensor:
    """Self-training CE on the branch's own argmax, gated per region.

    Pixels in regions scoring below the threshold contribute nothing; the
    argmax target carries no gradient.
    """
    mask = upsample_decision(rc, logits.shape[-2:], threshold)
    target = logits.argmax(dim=1)
    return masked_ce(logits, target, mask.to(logits.dtype))


def dynamic_region_loss(logits: torch.Tensor, rc1: torch.Tensor, rc2: torch.Tensor,
                        threshold: float) -> torch.Tensor:
    """Self-training CE weighted 2/1/0 by how many discriminators approve a region."""
    combined = combine_decision_maps(rc1, rc2, threshold)
    weights = weight_mask(combined, logits.shape[-2:]).to(logits.dtype)
    target = logits.argmax(dim=1)
    return masked_ce(logits, target, weights)


def feature_matching_loss(f_pred: torch.Tensor, f_gt: torch.Tensor) -> torch.Tensor:
    """L1 distance between per-channel feature means (batch and space averaged)."""
    if f_pred.dim() != 4 or f_gt.dim() != 4:
        raise ValueError("feature maps must be (B, F, h, w)")
    if f_pred.shape[1] != f_gt.shape[1]:
        raise ValueError(
            f"feature channel mismatch: {f_pred.shape[1]} vs {f_gt.shape[1]}"
        )
    return (f_gt.mean(dim=(0, 2, 3)) - f_pred.mean(dim=(0, 2, 3))).abs().sum()


def supervised_loss(logits_1: torch.Tensor, logits_2: torch.Tensor,
                    labels: torch.Tensor) -> torch.Tensor:
    """Both branches' CE against ground truth, IGNORE pixels excluded."""
    ones = torch.ones(labels.shape, dtype=logits_1.dtype, device=logits_1.device)
    return masked_ce(logits_1, labels, ones) + masked_ce(logits_2, labels, ones)


def cps_loss(logits_1: torch.Tensor, logits_2: torch.Tensor) -> torch.Tensor:
    """Each branch trained on the other branch's argmax pseudo-label."""
    target_for_1 = logits_2.argmax(dim=1)
    target_for_2 = logits_1.argmax(dim=1)
    ones = torch.ones(target_for_1.shape, dtype=logits_1.dtype, device=logits_1.device)
    return masked_ce(logits_1, target_for_1, ones) + masked_ce(logits_2, target_for_2, ones)


def total_loss(sup, cps, region, fm, weights: LossWeights):
    """sup + lambda_cps*cps + lambda_region*(ls or dr) + lambda_feature*fm."""
    for name, term in (("sup", sup), ("cps", cps), ("ls_or_dr", region), ("fm", fm)):
        value = float(term.detach()) if torch.is_tensor(term) else float(term)
        if value != value:  # NaN
            raise NumericsError(f"loss term {name} is NaN")
    return (sup + weights.lambda_cps * cps + weights.lambda_region * region
            + weights.lambda_feature * fm)


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy pushing real scores to 1 and fake scores to 0."""
    real = real_scores.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    fake = fake_scores.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return -real.log().mean() - (1.0 - fake).log().mean()


def adversarial_scores(rc: torch.Tensor, score: torch.Tensor) -> torch.Tensor:
    """Flatten region cells and the pooled score into one score vector.

    The adversarial BCE is applied to every region cell and to the pooled
    score, so the decision map itself becomes a meaningful real/fake signal.
    """
    return torch.cat([rc.reshape(-1), score.reshape(-1)])
