"""Color-adversarial example generation and mixed adversarial/clean training.

Each image receives a single additive 3-vector color shift, in RGB or HSV
space. The worst-case shift on the norm-rho ball is approximated to first
order by the normalized gradient of the classification loss with respect to
the shift, evaluated at zero shift. Training minimizes the sum of the loss on
the shifted batch and on the clean batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np
import torch

RGB = "rgb"
HSV = "hsv"
SPACES = (RGB, HSV)

# loss_fn(perturbed_images) -> scalar loss, summed (not averaged) over
# independent items so per-image gradients do not couple through reduction.
LossFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ColorAdvConfig:
    rho_rgb: float = 0.1
    rho_hsv: float = 0.1
    space_policy: str = "both"  # both | rgb | hsv
    fallback: str = "random"  # zero-gradient fallback: random | skip
    iterations: int = 300
    interleave: bool = False

    def validate(self) -> None:
        if self.rho_rgb <= 0 or self.rho_hsv <= 0:
            raise ValueError("rho values must be > 0")
        if self.space_policy not in ("both", RGB, HSV):
            raise ValueError(f"space_policy must be both|rgb|hsv, got {self.space_policy!r}")
        if self.fallback not in ("random", "skip"):
            raise ValueError(f"fallback must be random|skip, got {self.fallback!r}")

    def rho(self, space: str) -> float:
        return self.rho_rgb if space == RGB else self.rho_hsv

    def sample_space(self, rng: np.random.Generator) -> str:
        if self.space_policy == "both":
            return SPACES[int(rng.integers(0, 2))]
        return self.space_policy


# ---------------------------------------------------------------------------
# Differentiable color-space application (tensors are (B, 3, H, W) in [0,1]).


def rgb_to_hsv_t(rgb: torch.Tensor) -> torch.Tensor:
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    maxc, _ = rgb.max(dim=1)
    minc, _ = rgb.min(dim=1)
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / maxc.clamp_min(1e-12), torch.zeros_like(maxc))
    dz = delta.clamp_min(1e-12)
    h = torch.zeros_like(maxc)
    is_r = (maxc == r) & (delta > 0)
    is_g = (maxc == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    h = torch.where(is_r, ((g - b) / dz) % 6.0, h)
    h = torch.where(is_g, (b - r) / dz + 2.0, h)
    h = torch.where(is_b, (r - g) / dz + 4.0, h)
    return torch.stack([(h / 6.0) % 1.0, s, maxc], dim=1)


def hsv_to_rgb_t(hsv: torch.Tensor) -> torch.Tensor:
    h = hsv[:, 0] % 1.0
    s = hsv[:, 1].clamp(0.0, 1.0)
    v = hsv[:, 2].clamp(0.0, 1.0)
    f = h * 6.0
    i = torch.floor(f)
    frac = f - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * frac)
    t = v * (1.0 - s * (1.0 - frac))
    i = (i.long() % 6).unsqueeze(1)
    r = torch.stack([v, q, p, p, t, v], dim=1).gather(1, i).squeeze(1)
    g = torch.stack([t, v, v, q, p, p], dim=1).gather(1, i).squeeze(1)
    b = torch.stack([p, p, t, v, v, q], dim=1).gather(1, i).squeeze(1)
    return torch.stack([r, g, b], dim=1)


def apply_perturbation(images: torch.Tensor, r: torch.Tensor, space: str) -> torch.Tensor:
    """Shift every pixel of image i by the 3-vector r[i] in the given space.

    RGB adds and clamps; HSV wraps hue (circular) and clamps S/V before
    converting back. Differentiable in ``r``.
    """
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}, got {space!r}")
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"images must be (B, 3, H, W), got {tuple(images.shape)}")
    if r.shape != (images.shape[0], 3):
        raise ValueError(f"r must be (B, 3), got {tuple(r.shape)}")
    shift = r[:, :, None, None]
    if space == RGB:
        return (images + shift).clamp(0.0, 1.0)
    hsv = rgb_to_hsv_t(images)
    h = (hsv[:, 0] + shift[:, 0]) % 1.0
    s = (hsv[:, 1] + shift[:, 1]).clamp(0.0, 1.0)
    v = (hsv[:, 2] + shift[:, 2]).clamp(0.0, 1.0)
    return hsv_to_rgb_t(torch.stack([h, s, v], dim=1))


def color_grad(images: torch.Tensor, loss_fn: LossFn, space: str) -> torch.Tensor:
    """Gradient of the loss w.r.t. each image's color shift, at zero shift."""
    r = torch.zeros(images.shape[0], 3, dtype=images.dtype, requires_grad=True)
    loss = loss_fn(apply_perturbation(images, r, space))
    (g,) = torch.autograd.grad(loss, r)
    if not torch.isfinite(g).all():
        raise FloatingPointError("non-finite color gradient")
    return g.detach()


def adv_perturbation(
    g: torch.Tensor,
    rho: float,
    rng: np.random.Generator,
    fallback: str = "random",
) -> torch.Tensor:
    """Scale each per-image gradient to norm rho; zero gradients fall back to
    a random direction (or stay zero with fallback="skip")."""
    if rho <= 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    norms = g.norm(dim=1, keepdim=True)
    unit = g / norms.clamp_min(1e-30)
    r = rho * unit
    zero = norms.squeeze(1) <= 0
    if bool(zero.any()):
        if fallback == "random":
            rand = torch.as_tensor(rng.normal(size=(int(zero.sum()), 3)), dtype=g.dtype)
            rand = rand / rand.norm(dim=1, keepdim=True).clamp_min(1e-30)
            r[zero] = rho * rand
        else:
            r[zero] = 0.0
    return r


def coloradv_batch_loss(
    images: torch.Tensor,
    loss_fn: LossFn,
    config: ColorAdvConfig,
    rng: np.random.Generator,
    space: str | None = None,
) -> Tuple[torch.Tensor, torch.Tensor, str]:
    """One alternation: craft the shift, then return
    (adversarial loss + clean loss, the shift used, the space sampled).

    The caller backpropagates the returned loss into the model parameters.
    """
    space = space or config.sample_space(rng)
    g = color_grad(images, loss_fn, space)
    r_adv = adv_perturbation(g, config.rho(space), rng, config.fallback)
    loss_adv = loss_fn(apply_perturbation(images, r_adv, space))
    loss_clean = loss_fn(images)
    return loss_adv + loss_clean, r_adv, space
