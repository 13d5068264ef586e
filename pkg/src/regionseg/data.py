"""Synthetic scene generation, dataset loading, partitioning and augmentation.

Datasets are sequences of :class:`Sample`. Labels use the VOC convention:
class ids 0..C-1 plus ``IGNORE_LABEL`` (255) for pixels excluded from
losses and metrics.
"""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .common import IGNORE_LABEL, ConfigurationError, derive_seed

ALLOWED_RATIOS = (Fraction(1, 16), Fraction(1, 8), Fraction(1, 4), Fraction(1, 2))

# Pixel noise of the synthetic generator; small enough that shapes stay
# clearly visible, large enough that labels are not trivially recoverable
# from a single color value.
NOISE_SIGMA = 0.05


@dataclass
class Sample:
    """One image with its dense label map.

    image: (H, W, 3) float32 in [0, 1]
    label: (H, W) int64 in {0..C-1} | {IGNORE_LABEL}
    """

    image: np.ndarray
    label: np.ndarray
    id: str


@dataclass(frozen=True)
class Partition:
    labeled_ids: tuple
    unlabeled_ids: tuple
    ratio: Fraction
    seed: int


@dataclass(frozen=True)
class AugmentationConfig:
    crop_size: tuple = (64, 64)
    hflip_prob: float = 0.5
    scale_range: tuple = (1.0, 1.0)

    def validate(self):
        if self.scale_range[0] > self.scale_range[1]:
            raise ConfigurationError(
                f"scale_range lo {self.scale_range[0]} > hi {self.scale_range[1]}"
            )
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigurationError(f"hflip_prob {self.hflip_prob} outside [0, 1]")
        if min(self.crop_size) < 1:
            raise ConfigurationError(f"crop_size {self.crop_size} must be positive")


def class_palette(num_classes: int) -> np.ndarray:
    """(C, 3) float RGB palette for rendering label maps; class 0 is dark."""
    colors = [(0.12, 0.12, 0.12)]
    for c in range(1, num_classes):
        hue = ((c - 1) * 0.381966) % 1.0  # golden-ratio spacing
        colors.append(colorsys.hsv_to_rgb(hue, 0.75, 0.9))
    return np.array(colors, dtype=np.float32)


def _raster_ellipse(h, w, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:h, 0:w]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _raster_polygon(h, w, points):
    """Fill a convex polygon given as an (N, 2) array of (y, x) vertices."""
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.asarray(points, dtype=np.float64)
    # orientation sign of the polygon
    area = 0.0
    n = len(pts)
    for i in range(n):
        y0, x0 = pts[i]
        y1, x1 = pts[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    sign = 1.0 if area >= 0 else -1.0
    inside = np.ones((h, w), dtype=bool)
    for i in range(n):
        y0, x0 = pts[i]
        y1, x1 = pts[(i + 1) % n]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= sign * cross >= 0
    return inside


def _shape_mask(kind: str, rng: np.random.Generator, h: int, w: int, cy, cx, radius):
    if kind == "ellipse":
        ry = radius * rng.uniform(0.6, 1.0)
        rx = radius * rng.uniform(0.6, 1.0)
        return _raster_ellipse(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi))
    if kind == "rectangle":
        ry = radius * rng.uniform(0.55, 0.95)
        rx = radius * rng.uniform(0.55, 0.95)
        ang = rng.uniform(0, np.pi)
        ca, sa = np.cos(ang), np.sin(ang)
        corners = []
        for dy, dx in ((-ry, -rx), (-ry, rx), (ry, rx), (ry, -rx)):
            corners.append((cy + dy * ca - dx * sa, cx + dy * sa + dx * ca))
        return _raster_polygon(h, w, corners)
    if kind == "triangle":
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
        # keep vertices angularly spread so the triangle has real area
        while np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))) < 0.7:
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
        r = radius * rng.uniform(0.75, 1.1, size=3)
        pts = [(cy + r[i] * np.sin(angles[i]), cx + r[i] * np.cos(angles[i])) for i in range(3)]
        return _raster_polygon(h, w, pts)
    raise ValueError(f"unknown shape kind {kind!r}")


_SHAPE_KINDS = ("ellipse", "rectangle", "triangle")


def generate_synthetic_scene(seed: int, size=(64, 64), num_classes: int = 3) -> Sample:
    """Deterministically render one scene of colored shapes on a dark background.

    Foreground class ``c`` draws one shape whose kind is fixed by the class
    (ellipse / rectangle / triangle, cycling), at a random position, size,
    orientation and color. Shape kind rather than color carries the class,
    so a segmenter must learn geometry, not a color lookup.
    """
    h, w = size
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    if h < 16 or w < 16:
        raise ConfigurationError(f"size must be at least 16x16, got {size}")

    rng = np.random.default_rng(seed)
    background = rng.uniform(0.08, 0.30, size=3)
    image = np.ones((h, w, 3), dtype=np.float64) * background
    # mild background texture so "flat color" is never a perfect cue
    image += rng.normal(0.0, 0.02, size=(h, w, 1))
    label = np.zeros((h, w), dtype=np.int64)

    placed = []
    for c in range(1, num_classes):
        kind = _SHAPE_KINDS[(c - 1) % len(_SHAPE_KINDS)]
        radius = rng.uniform(0.14, 0.24) * min(h, w)
        cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
        for _ in range(20):  # keep shapes from stacking on one spot
            if all(np.hypot(cy - py, cx - px) > 0.8 * (radius + pr) for py, px, pr in placed):
                break
            cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
        placed.append((cy, cx, radius))

        color = rng.uniform(0.45, 0.95, size=3)
        while np.abs(color - background).sum() < 0.6:
            color = rng.uniform(0.45, 0.95, size=3)
        mask = _shape_mask(kind, rng, h, w, cy, cx, radius)
        image[mask] = color
        label[mask] = c

    image += rng.normal(0.0, NOISE_SIGMA, size=(h, w, 3))
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=image.astype(np.float32), label=label, id=f"scene-{seed:08d}")


def build_synthetic_dataset(num_samples: int, size, num_classes: int, seed: int,
                            prefix: str = "train") -> list:
    """A list of scenes with per-sample seeds fanned out from ``seed``."""
    samples = []
    for i in range(num_samples):
        s = generate_synthetic_scene(derive_seed(seed, prefix, i), size, num_classes)
        s.id = f"{prefix}-{i:05d}"
        samples.append(s)
    return samples


def load_dataset(root, num_classes: int | None = None) -> list:
    """Load ``root/images/<id>.png`` + ``root/masks/<id>.png`` pairs.

    Masks must be single-channel integer images; 255 passes through as the
    ignore value. When ``num_classes`` is given, any mask value outside
    {0..C-1, 255} fails validation with the offending ids listed.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise ConfigurationError(f"dataset root {root} must contain images/ and masks/")

    ids = sorted(p.stem for p in img_dir.iterdir() if p.suffix.lower() == ".png")
    if not ids:
        raise ConfigurationError(f"no .png images found under {img_dir}")

    missing = [i for i in ids if not (mask_dir / f"{i}.png").exists()]
    if missing:
        raise ConfigurationError(f"missing masks for ids: {', '.join(missing)}")

    samples, bad_value_ids = [], []
    for sid in ids:
        image = np.asarray(Image.open(img_dir / f"{sid}.png").convert("RGB"),
                           dtype=np.float32) / 255.0
        mask_img = Image.open(mask_dir / f"{sid}.png")
        if mask_img.mode not in ("L", "P", "I", "I;16", "1"):
            raise ConfigurationError(
                f"mask for id {sid!r} is not a single-channel integer image "
                f"(mode {mask_img.mode})"
            )
        label = np.asarray(mask_img, dtype=np.int64)
        if label.shape != image.shape[:2]:
            raise ConfigurationError(
                f"mask for id {sid!r} has shape {label.shape}, image {image.shape[:2]}"
            )
        if num_classes is not None:
            values = np.unique(label)
            if np.any((values >= num_classes) & (values != IGNORE_LABEL)):
                bad_value_ids.append(sid)
        samples.append(Sample(image=image, label=label, id=sid))

    if bad_value_ids:
        raise ConfigurationError(
            f"mask values >= num_classes={num_classes} (and != {IGNORE_LABEL}) "
            f"in ids: {', '.join(bad_value_ids)}"
        )
    return samples


def save_dataset(samples, root) -> None:
    """Write samples in the images/ + masks/ on-disk layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray((np.clip(s.image, 0, 1) * 255).astype(np.uint8)).save(
            root / "images" / f"{s.id}.png")
        Image.fromarray(s.label.astype(np.uint8), mode="L").save(
            root / "masks" / f"{s.id}.png")


def make_partition(ids, ratio: Fraction, seed: int) -> Partition:
    """Deterministic labeled/unlabeled split: shuffle, take the first floor(ratio*N)."""
    ids = list(ids)
    if not ids:
        raise ConfigurationError("cannot partition an empty id list")
    ratio = Fraction(ratio)
    if ratio not in ALLOWED_RATIOS:
        raise ConfigurationError(
            f"ratio {ratio} not in allowed set {[str(r) for r in ALLOWED_RATIOS]}"
        )
    order = list(ids)
    rng = np.random.default_rng(seed)
    # explicit Fisher-Yates so the shuffle is pinned to this loop, not a
    # library's permutation internals
    for i in range(len(order) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    n_labeled = max(1, int(len(order) * ratio))
    return Partition(
        labeled_ids=tuple(order[:n_labeled]),
        unlabeled_ids=tuple(order[n_labeled:]),
        ratio=ratio,
        seed=seed,
    )


def save_partition(partition: Partition, path) -> None:
    lines = [f"#ratio={partition.ratio} seed={partition.seed}"]
    lines.extend(partition.labeled_ids)
    lines.append("#unlabeled")
    lines.extend(partition.unlabeled_ids)
    Path(path).write_text("\n".join(lines) + "\n")


def load_partition(path) -> Partition:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#ratio="):
        raise ConfigurationError(f"{path} is not a partition file (missing header)")
    header = lines[0][1:].split()
    ratio = Fraction(header[0].split("=", 1)[1])
    seed = int(header[1].split("=", 1)[1])
    labeled, unlabeled, bucket = [], [], None
    bucket = labeled
    for line in lines[1:]:
        if line == "#unlabeled":
            bucket = unlabeled
            continue
        if line:
            bucket.append(line)
    return Partition(tuple(labeled), tuple(unlabeled), ratio, seed)


def _resize_sample(image: np.ndarray, label: np.ndarray, new_hw) -> tuple:
    nh, nw = new_hw
    chans = [
        np.asarray(
            Image.fromarray(image[:, :, c], mode="F").resize((nw, nh), Image.BILINEAR)
        )
        for c in range(image.shape[2])
    ]
    image_r = np.stack(chans, axis=2).astype(np.float32)
    label_r = np.asarray(
        Image.fromarray(label.astype(np.uint8), mode="L").resize((nw, nh), Image.NEAREST),
        dtype=np.int64,
    )
    return image_r, label_r


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Random scale + horizontal flip + pad/crop; image and label move together.

    Labels are resized nearest-neighbor and padded with IGNORE; images are
    resized bilinearly and padded with zeros.
    """
    cfg.validate()
    image, label = sample.image, sample.label
    h, w = label.shape

    lo, hi = cfg.scale_range
    if (lo, hi) != (1.0, 1.0):
        factor = rng.uniform(lo, hi)
        nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
        if (nh, nw) != (h, w):
            image, label = _resize_sample(image, label, (nh, nw))
            h, w = nh, nw

    if cfg.hflip_prob > 0 and rng.uniform() < cfg.hflip_prob:
        image = image[:, ::-1].copy()
        label = label[:, ::-1].copy()

    ch, cw = cfg.crop_size
    pad_h, pad_w = max(0, ch - h), max(0, cw - w)
    if pad_h or pad_w:
        top, left = pad_h // 2, pad_w // 2
        image = np.pad(image, ((top, pad_h - top), (left, pad_w - left), (0, 0)))
        label = np.pad(label, ((top, pad_h - top), (left, pad_w - left)),
                       constant_values=IGNORE_LABEL)
        h, w = label.shape

    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return Sample(
        image=np.ascontiguousarray(image[y0:y0 + ch, x0:x0 + cw]),
        label=np.ascontiguousarray(label[y0:y0 + ch, x0:x0 + cw]),
        id=sample.id,
    )
