"""Cell and slide-bag containers plus top-K instance selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .taxonomy import check_class_id


@dataclass
class CellImage:
    """One cell tile.

    ``latent_label`` is the synthetic ground truth and must never be read by
    any training code; it exists only so oracle checks can verify behaviour.
    """

    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: Optional[int] = None
    description_labels: Optional[np.ndarray] = None  # multi-hot over vocabulary
    latent_label: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("pixels must be finite")
        self.pixels = px
        if self.label is not None:
            check_class_id(self.label)
        if self.latent_label is not None:
            check_class_id(self.latent_label)


@dataclass
class WsiBag:
    """Ordered collection of cell instances with a slide-level label."""

    id: str
    instances: List[CellImage]
    label: int
    domain: str
    k: int = 256

    def __post_init__(self):
        if len(self.instances) < 1:
            raise ValueError(f"bag {self.id!r} must contain at least one instance")
        check_class_id(self.label)
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")

    def __len__(self) -> int:
        return len(self.instances)


def topk_select(scores: Sequence[float], k: int) -> np.ndarray:
    """Indices of the min(k, n) largest scores, descending, ties by index.

    The ranking is prefix-stable: topk_select(s, k')[i] == topk_select(s, k)[i]
    for all i < k' <= k.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError(f"scores must be one-dimensional, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    # lexsort: primary key is the last one. Descending score, then ascending index.
    order = np.lexsort((np.arange(len(s)), -s))
    return order[: min(k, len(s))]
