"""Semi-weakly supervised integrated fine-tuning: one joint step over the
labelled cell stream and the weakly labelled slide-bag stream.

Per step: strong-augmented cells (labelled + bag) go through the student
encoder; the slide head is supervised by slide labels; the EMA teacher
produces per-cell pseudo labels from weak augmentations; the slide head's
instance activation map re-picks pseudo labels for the slide's own class with
priority over the teacher's confidence, and the masked cell loss trains the
student on the refined labels. The total loss is the plain sum of the three
streams, and only the EMA update ever touches the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .gradcam import gradcam_scores, normalize_cam
from .models import ModelBundle, cell_classify, ema_update, images_to_tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SwiftConfig:
    cell_batch_size: int = 128
    wsi_batch_size: int = 2
    bag_size: int = 256
    cam_threshold: float = 0.5  # on the per-bag min-max normalized activation
    confidence_threshold: float = 0.9
    ema_decay: float = 0.999
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    iterations: int = 2000
    refresh_every_epochs: int = 1  # re-rank bag top-K with current student
    pretrain_iterations: int = 600
    warm_start: bool = True
    freeze_encoder: bool = False
    enable_cell_stream: bool = True
    enable_semi_weak: bool = True
    rectify_cam: bool = False

    def validate(self) -> None:
        if not 0.0 < self.cam_threshold < 1.0:
            raise ValueError(f"cam_threshold must be in (0,1), got {self.cam_threshold}")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError(f"confidence_threshold must be in (0,1), got {self.confidence_threshold}")
        if min(self.cell_batch_size, self.wsi_batch_size, self.bag_size) < 1:
            raise ValueError("batch and bag sizes must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must be in [0,1], got {self.ema_decay}")


@dataclass
class PseudoLabelBatch:
    cam: np.ndarray  # normalized per-bag activations
    teacher_probs: np.ndarray  # (K, C), rows sum to 1
    y_refine: np.ndarray  # (K,), class ids (meaningless where mask == 0)
    mask: np.ndarray  # (K,), 0/1
    cam_branch: np.ndarray  # (K,), bool: True where the activation branch fired

    @property
    def mask_rate(self) -> float:
        return float(self.mask.mean())

    @property
    def cam_rate(self) -> float:
        return float(self.cam_branch.mean())


def refine_pseudo_labels(
    cam: np.ndarray,
    teacher_probs: np.ndarray,
    wsi_class: int,
    cam_threshold: float,
    confidence_threshold: float,
) -> PseudoLabelBatch:
    """Per-instance label refinement.

    Expects ``cam`` already normalized per bag to [0,1]. The activation branch
    has priority: cam > tau1 assigns the slide's own class; otherwise a
    sufficiently confident teacher assigns its argmax; otherwise the instance
    is masked out of the loss.
    """
    cam = np.asarray(cam, dtype=np.float64)
    probs = np.asarray(teacher_probs, dtype=np.float64)
    if cam.ndim != 1 or probs.ndim != 2 or probs.shape[0] != cam.shape[0]:
        raise ValueError(f"shape mismatch: cam {cam.shape}, teacher_probs {probs.shape}")
    if not 0 <= wsi_class < probs.shape[1]:
        raise ValueError(f"wsi_class {wsi_class} out of range for {probs.shape[1]} classes")
    if not (0.0 < cam_threshold < 1.0 and 0.0 < confidence_threshold < 1.0):
        raise ValueError("thresholds must be in (0, 1)")
    cam_hit = cam > cam_threshold
    conf_hit = probs.max(axis=1) > confidence_threshold
    mask = (cam_hit | conf_hit).astype(np.int64)
    y_refine = np.where(cam_hit, wsi_class, probs.argmax(axis=1)).astype(np.int64)
    return PseudoLabelBatch(cam=cam, teacher_probs=probs, y_refine=y_refine, mask=mask, cam_branch=cam_hit)


def masked_class_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over unmasked elements; zero (no grad) if all masked."""
    if logits.shape[0] != targets.shape[0] or targets.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, mask {tuple(mask.shape)}"
        )
    mask = mask.to(logits.dtype)
    kept = mask.sum()
    if kept.item() == 0:
        return logits.new_zeros(())
    per_elem = F.cross_entropy(logits, targets, reduction="none")
    return (per_elem * mask).sum() / kept


@dataclass
class WsiTrainingBatch:
    """One slide's top-K cells, strongly and weakly augmented."""

    strong: np.ndarray  # (K, H, W, 3)
    weak: np.ndarray  # (K, H, W, 3)
    label: int


def swift_step(
    labeled_images: Optional[np.ndarray],
    labeled_targets: Optional[np.ndarray],
    wsi_batch: Sequence[WsiTrainingBatch],
    bundle: ModelBundle,
    optimizer: torch.optim.Optimizer,
    config: SwiftConfig,
) -> Dict[str, float]:
    """One optimization step; returns the loss components and mask rates.

    The teacher receives no gradient: it changes only through the EMA update
    at the end of the step.
    """
    has_cells = labeled_images is not None and len(labeled_images) > 0
    if not has_cells and not wsi_batch:
        raise ValueError("both the cell batch and the WSI batch are empty")

    chunks = []
    if has_cells:
        chunks.append(np.asarray(labeled_images))
    for wb in wsi_batch:
        chunks.append(np.asarray(wb.strong))
    x_strong = images_to_tensor(np.concatenate(chunks, axis=0))
    z_all = bundle.student(x_strong)
    if config.freeze_encoder:
        # Features are constants for the heads; keep them a graph leaf so the
        # activation map can still differentiate through the slide head.
        z_all = z_all.detach().requires_grad_(True)
    cell_logits_all = bundle.cell_head(z_all)

    n_lab = len(labeled_images) if has_cells else 0
    if has_cells:
        targets = torch.as_tensor(np.asarray(labeled_targets), dtype=torch.long)
        loss_cell_sup = F.cross_entropy(cell_logits_all[:n_lab], targets)
    else:
        loss_cell_sup = z_all.new_zeros(())

    loss_wsi_sup = z_all.new_zeros(())
    loss_semi_weak = z_all.new_zeros(())
    mask_rates: List[float] = []
    cam_rates: List[float] = []
    offset = n_lab
    for wb in wsi_batch:
        k = len(wb.strong)
        z_bag = z_all[offset : offset + k]
        bag_logits = cell_logits_all[offset : offset + k]
        offset += k

        wsi_logits, _ = bundle.wsi_head(z_bag)
        loss_wsi_sup = loss_wsi_sup + F.cross_entropy(
            wsi_logits.unsqueeze(0), torch.tensor([wb.label], dtype=torch.long)
        )

        if config.enable_semi_weak:
            with torch.no_grad():
                z_teacher = bundle.teacher(images_to_tensor(wb.weak))
                teacher_probs, _ = cell_classify(z_teacher, bundle.cell_head)
            beta = gradcam_scores(
                z_bag, wb.label, bundle.wsi_head,
                rectify=config.rectify_cam, logits=wsi_logits, retain_graph=True,
            )
            cam = normalize_cam(beta.detach())
            refined = refine_pseudo_labels(
                cam.numpy(),
                teacher_probs.numpy(),
                wb.label,
                config.cam_threshold,
                config.confidence_threshold,
            )
            loss_semi_weak = loss_semi_weak + masked_class_loss(
                bag_logits,
                torch.as_tensor(refined.y_refine, dtype=torch.long),
                torch.as_tensor(refined.mask),
            )
            mask_rates.append(refined.mask_rate)
            cam_rates.append(refined.cam_rate)

    if wsi_batch:
        loss_wsi_sup = loss_wsi_sup / len(wsi_batch)
        if config.enable_semi_weak:
            loss_semi_weak = loss_semi_weak / len(wsi_batch)

    loss_total = loss_cell_sup + loss_wsi_sup + loss_semi_weak
    if not torch.isfinite(loss_total):
        raise TrainingDiverged(
            f"non-finite loss: cell_sup={loss_cell_sup.item()}, "
            f"wsi_sup={loss_wsi_sup.item()}, semi_weak={loss_semi_weak.item()}"
        )

    optimizer.zero_grad(set_to_none=True)
    loss_total.backward()
    optimizer.step()
    if not config.freeze_encoder:
        ema_update(bundle.teacher, bundle.student, config.ema_decay)

    return {
        "L_cell_sup": float(loss_cell_sup.detach()),
        "L_wsi_sup": float(loss_wsi_sup.detach()),
        "L_semi_weak": float(loss_semi_weak.detach()),
        "L_total": float(loss_total.detach()),
        "mask_rate": float(np.mean(mask_rates)) if mask_rates else 0.0,
        "cam_rate": float(np.mean(cam_rates)) if cam_rates else 0.0,
    }
