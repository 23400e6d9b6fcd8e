"""Vectorized RGB<->HSV conversion on numpy arrays, all channels in [0,1]."""

from __future__ import annotations

import numpy as np


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """HxWx3 (or ...x3) RGB in [0,1] -> HSV with hue in [0,1)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)

    dz = np.maximum(delta, 1e-12)
    h = np.zeros_like(maxc)
    is_r = (maxc == r) & (delta > 0)
    is_g = (maxc == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    h = np.where(is_r, ((g - b) / dz) % 6.0, h)
    h = np.where(is_g, (b - r) / dz + 2.0, h)
    h = np.where(is_b, (r - g) / dz + 4.0, h)
    h = (h / 6.0) % 1.0
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """...x3 HSV with hue in [0,1) -> RGB in [0,1]."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    f = h * 6.0
    i = np.floor(f)
    frac = f - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * frac)
    t = v * (1.0 - s * (1.0 - frac))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def hsv_affine(rgb: np.ndarray, hue_shift: float, sat_scale: float, val_offset: float) -> np.ndarray:
    """Shift hue (wrapping), scale saturation and offset value, clamping S/V."""
    hsv = rgb_to_hsv(rgb)
    hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_scale, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + val_offset, 0.0, 1.0)
    return hsv_to_rgb(hsv)
