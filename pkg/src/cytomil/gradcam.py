"""Instance-level activation scores from slide-head gradients.

The score of instance k for slide class c is the mean over feature dimensions
of the gradient of the class logit with respect to that instance's feature
vector, obtained by reverse-mode differentiation through the attention
aggregation. Scores are signed; an optional rectification flag clips them at
zero for callers that want the canonical non-negative map.
"""

from __future__ import annotations

from typing import Optional, Tuple

import torch

from .models import AttentionMilHead


def gradcam_scores(
    z: torch.Tensor,
    class_idx: int,
    wsi_head: AttentionMilHead,
    rectify: bool = False,
    logits: Optional[torch.Tensor] = None,
    retain_graph: Optional[bool] = None,
) -> torch.Tensor:
    """Per-instance activation of slide class ``class_idx`` for bag features z.

    If ``logits`` is given it must come from a forward pass of ``wsi_head`` on
    this same ``z`` and the existing graph is reused (the trainer path);
    otherwise a fresh forward pass is run.
    """
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"bag features must be non-empty (N, D), got {tuple(z.shape)}")
    if not 0 <= class_idx < wsi_head.out.out_features:
        raise IndexError(f"class index {class_idx} out of range [0, {wsi_head.out.out_features})")
    if logits is None:
        z = z.detach().requires_grad_(True)
        logits, _ = wsi_head(z)
        retain = False if retain_graph is None else retain_graph
    else:
        retain = True if retain_graph is None else retain_graph
    if not z.requires_grad:
        raise ValueError("bag features must require grad to attribute through them")
    (grad,) = torch.autograd.grad(logits[class_idx], z, retain_graph=retain, create_graph=False)
    beta = grad.mean(dim=1)
    if rectify:
        beta = torch.clamp(beta, min=0.0)
    return beta


def normalize_cam(beta: torch.Tensor) -> torch.Tensor:
    """Min-max normalize a bag's activations to [0,1]; constant bags map to 0.

    Raw activations are scale-dependent, so thresholds are only meaningful on
    the normalized map.
    """
    lo, hi = beta.min(), beta.max()
    if (hi - lo) <= 0:
        return torch.zeros_like(beta)
    return (beta - lo) / (hi - lo)
