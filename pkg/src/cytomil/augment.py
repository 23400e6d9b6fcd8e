"""Cell-tile augmentation: weak (geometry only) and strong (plus crop/color).

Weak augmentation feeds the teacher's pseudo-label pass; strong augmentation
feeds the student. All outputs stay in [0,1] and keep the HxWx3 shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .colorspace import hsv_affine


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    rot90: bool = True
    rotate_deg: float = 8.0
    crop_scale_min: float = 1.0  # 1.0 disables cropping
    hue_jitter: float = 0.0
    sat_jitter: float = 0.0  # multiplicative range half-width
    val_jitter: float = 0.0
    noise_sigma: float = 0.0


WEAK_POLICY = AugmentPolicy()
STRONG_POLICY = AugmentPolicy(
    rotate_deg=15.0,
    crop_scale_min=0.8,
    hue_jitter=0.03,
    sat_jitter=0.15,
    val_jitter=0.06,
    noise_sigma=0.01,
)


def _geometry(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    if rng.random() < policy.flip_prob:
        img = img[:, ::-1]
    if rng.random() < policy.flip_prob:
        img = img[::-1, :]
    if policy.rot90:
        img = np.rot90(img, k=int(rng.integers(0, 4)))
    img = np.ascontiguousarray(img)
    if policy.rotate_deg > 0:
        angle = rng.uniform(-policy.rotate_deg, policy.rotate_deg)
        h, w = img.shape[:2]
        m = cv2.getRotationMatrix2D((w / 2, h / 2), angle, 1.0)
        img = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    return img


def _random_crop(img: np.ndarray, rng: np.random.Generator, scale_min: float) -> np.ndarray:
    if scale_min >= 1.0:
        return img
    h, w = img.shape[:2]
    scale = rng.uniform(scale_min, 1.0)
    ch, cw = max(4, int(round(h * scale))), max(4, int(round(w * scale)))
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    crop = img[y : y + ch, x : x + cw]
    return cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR)


def _apply(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    out = np.asarray(img, dtype=np.float32)
    if out.ndim != 3 or out.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got {out.shape}")
    out = _geometry(out, rng, policy)
    out = _random_crop(out, rng, policy.crop_scale_min)
    if policy.hue_jitter or policy.sat_jitter or policy.val_jitter:
        out = hsv_affine(
            out,
            hue_shift=rng.uniform(-policy.hue_jitter, policy.hue_jitter),
            sat_scale=1.0 + rng.uniform(-policy.sat_jitter, policy.sat_jitter),
            val_offset=rng.uniform(-policy.val_jitter, policy.val_jitter),
        ).astype(np.float32)
    if policy.noise_sigma > 0:
        out = out + rng.normal(0.0, policy.noise_sigma, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_weak(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = WEAK_POLICY) -> np.ndarray:
    """Flips, right-angle rotation and a small free rotation."""
    return _apply(img, rng, policy)


def augment_strong(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = STRONG_POLICY) -> np.ndarray:
    """Weak geometry plus random crop-resize, HSV color jitter and noise."""
    return _apply(img, rng, policy)
