"""Shared constants, error types and seed derivation."""
from __future__ import annotations

import hashlib

# Label value excluded from every loss and metric (VOC convention).
IGNORE_LABEL = 255


class ConfigurationError(Exception):
    """Invalid configuration, dataset layout or checkpoint mismatch."""


class NumericsError(Exception):
    """A loss or score became NaN/inf during training."""


def derive_seed(base: int, *labels) -> int:
    """Derive a 32-bit child seed from a base seed and a label path.

    Fan-out is stable across platforms and python versions, so every
    consumer of randomness (partition, model init, batch draws, ...)
    can be keyed off one top-level seed.
    """
    key = ":".join([str(int(base))] + [str(l) for l in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")
