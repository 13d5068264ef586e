"""Segmentation branches and region-consistency discriminators.

Two independently seeded encoder-decoder branches produce per-pixel class
logits. Each branch is paired with a patch discriminator that scores, per
16x16 region, how much a (image, class-probability) concatenation looks
like a (image, ground-truth one-hot) concatenation.
"""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

# Both the branch encoder and the discriminator reduce resolution 16x, so
# one discriminator output cell judges one 16x16 region of the input.
ENCODER_STRIDE = 16
MIN_DISC_INPUT = 16


def _norm(channels: int) -> nn.GroupNorm:
    groups = 4 if channels % 4 == 0 else 1
    return nn.GroupNorm(groups, channels)


class _ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class SegmentationBranch(nn.Module):
    """Small U-shaped encoder-decoder, 4 downsampling stages, skip connections."""

    def __init__(self, num_classes: int, in_channels: int = 3, base_channels: int = 16):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        w = base_channels
        self.num_classes = num_classes
        self.enc1 = _ConvBlock(in_channels, w)
        self.enc2 = _ConvBlock(w, 2 * w)
        self.enc3 = _ConvBlock(2 * w, 4 * w)
        self.enc4 = _ConvBlock(4 * w, 8 * w)
        self.bottleneck = _ConvBlock(8 * w, 8 * w)
        self.pool = nn.MaxPool2d(2)
        self.dec4 = _ConvBlock(16 * w, 4 * w)
        self.dec3 = _ConvBlock(8 * w, 2 * w)
        self.dec2 = _ConvBlock(4 * w, w)
        self.dec1 = _ConvBlock(2 * w, w)
        self.head = nn.Conv2d(w, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        pad_h = (-h) % ENCODER_STRIDE
        pad_w = (-w) % ENCODER_STRIDE
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")

        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        e4 = self.enc4(self.pool(e3))
        b = self.bottleneck(self.pool(e4))

        up = lambda t: F.interpolate(t, scale_factor=2, mode="nearest")
        d4 = self.dec4(torch.cat([up(b), e4], dim=1))
        d3 = self.dec3(torch.cat([up(d4), e3], dim=1))
        d2 = self.dec2(torch.cat([up(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([up(d2), e1], dim=1))
        logits = self.head(d1)

        if pad_h or pad_w:
            logits = logits[..., :h, :w]
        return logits


class DiscriminatorOutput(NamedTuple):
    rc: torch.Tensor        # (B, 1, H/16, W/16) region scores in [0, 1]
    features: torch.Tensor  # (B, F, H/16, W/16) activations after the feature layer
    score: torch.Tensor     # (B,) pooled real/fake score in (0, 1)


def pooled_score(rc_logits: torch.Tensor) -> torch.Tensor:
    """Average-pool the pre-sigmoid region logits, then squash: one score per item."""
    return torch.sigmoid(rc_logits.mean(dim=(1, 2, 3)))


class Discriminator(nn.Module):
    """5-conv patch discriminator: 4 stride-2 convs, then a 1-channel conv.

    The final conv produces per-region logits at 1/16 resolution; sigmoid
    gives the region-consistency decision map, and the pooled pre-sigmoid
    mean gives the per-item score. Features are taken after the penultimate
    (4th) conv for feature matching.
    """

    def __init__(self, in_channels: int, base_channels: int = 32):
        super().__init__()
        w = base_channels
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_channels, w, 4, stride=2, padding=1),
                          nn.LeakyReLU(0.2, inplace=True)),
            nn.Sequential(nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
                          nn.LeakyReLU(0.2, inplace=True)),
            nn.Sequential(nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
                          nn.LeakyReLU(0.2, inplace=True)),
            nn.Sequential(nn.Conv2d(4 * w, 8 * w, 4, stride=2, padding=1),
                          nn.LeakyReLU(0.2, inplace=True)),
        ])
        # kernel-4 stride-1 conv with asymmetric padding keeps the spatial size
        self.final = nn.Conv2d(8 * w, 1, 4, stride=1, padding=0)

    def forward(self, cm: torch.Tensor) -> DiscriminatorOutput:
        if min(cm.shape[-2:]) < MIN_DISC_INPUT:
            raise ValueError(
                f"discriminator input {tuple(cm.shape[-2:])} smaller than "
                f"{MIN_DISC_INPUT}x{MIN_DISC_INPUT}"
            )
        h = cm
        for stage in self.stages:
            h = stage(h)
        features = h
        rc_logits = self.final(F.pad(h, (1, 2, 1, 2)))
        return DiscriminatorOutput(
            rc=torch.sigmoid(rc_logits),
            features=features,
            score=pooled_score(rc_logits),
        )


def build_branch(seed: int, num_classes: int, base_channels: int = 16,
                 in_channels: int = 3) -> SegmentationBranch:
    """Branch with parameters drawn from an isolated RNG seeded by ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return SegmentationBranch(num_classes, in_channels, base_channels)


def build_discriminator(seed: int, num_classes: int, base_channels: int = 32,
                        image_channels: int = 3) -> Discriminator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Discriminator(image_channels + num_classes, base_channels)


def branch_predict(branch: SegmentationBranch, images: torch.Tensor) -> torch.Tensor:
    """Per-pixel class logits; softmax over dim 1 yields the probability map."""
    return branch(images)
