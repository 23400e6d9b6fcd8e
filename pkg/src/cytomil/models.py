"""Differentiable components: cell encoder, cell head, attention-MIL slide head.

The encoder is a small strided conv net with per-sample (group) normalization;
batch statistics are avoided deliberately because bag instances share style
within a slide, which makes batch norms collapse when fine-tuning on top-K
bags. Per-cell features are the concatenated stage-wise global averages
projected to the feature dimension, so low-level texture survives pooling.
"""

from __future__ import annotations

import copy
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .taxonomy import N_CLASSES

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 128
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 128)
    n_classes: int = N_CLASSES
    n_wsi_classes: int = N_CLASSES
    attention_hidden: int = 128
    mlp_widths: Tuple[int, ...] = (128, 128, 128, 128)
    dropout: float = 0.1


class CellEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        blocks = []
        c_in = 3
        for c in cfg.encoder_channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c, kernel_size=3, stride=2, padding=1),
                    nn.GroupNorm(1, c),
                    nn.ReLU(inplace=True),
                )
            )
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.proj = nn.Linear(sum(cfg.encoder_channels), cfg.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = []
        for block in self.blocks:
            x = block(x)
            pooled.append(x.mean(dim=(2, 3)))
        return self.proj(torch.cat(pooled, dim=1))


class CellHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.feature_dim, cfg.n_classes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc(z)


def normalize_attention(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the instance axis: weights are non-negative and sum to 1."""
    return torch.softmax(logits, dim=0)


class AttentionMilHead(nn.Module):
    """Gated attention pooling followed by a dense MLP classifier.

    Each MLP layer is Linear -> LayerNorm -> ReLU -> Dropout; the final linear
    maps to slide-class logits.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.feature_dim, cfg.attention_hidden
        self.attn_v = nn.Linear(d, h)
        self.attn_u = nn.Linear(d, h)
        self.attn_w = nn.Linear(h, 1)
        layers = []
        width_in = d
        for w in cfg.mlp_widths:
            layers += [nn.Linear(width_in, w), nn.LayerNorm(w), nn.ReLU(inplace=True), nn.Dropout(cfg.dropout)]
            width_in = w
        self.mlp = nn.Sequential(*layers)
        self.out = nn.Linear(width_in, cfg.n_wsi_classes)

    def attention_logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.attn_w(torch.tanh(self.attn_v(z)) * torch.sigmoid(self.attn_u(z))).squeeze(-1)

    def forward(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """z: (N, D) bag features -> (slide logits, attention weights (N,))."""
        if z.ndim != 2 or z.shape[0] == 0:
            raise ValueError(f"bag features must be a non-empty (N, D) matrix, got {tuple(z.shape)}")
        a = normalize_attention(self.attention_logits(z))
        pooled = (a.unsqueeze(-1) * z).sum(dim=0)
        return self.out(self.mlp(pooled.unsqueeze(0))).squeeze(0), a


@dataclass
class ModelBundle:
    """All trainable parameter sets plus the frozen EMA teacher encoder."""

    config: ModelConfig
    student: CellEncoder
    teacher: CellEncoder
    cell_head: CellHead
    wsi_head: AttentionMilHead
    text_encoder: Optional[nn.Module] = None

    @classmethod
    def create(cls, cfg: ModelConfig) -> "ModelBundle":
        student = CellEncoder(cfg)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        return cls(cfg, student, teacher, CellHead(cfg), AttentionMilHead(cfg))

    def trainable_modules(self) -> Iterable[nn.Module]:
        return (self.student, self.cell_head, self.wsi_head)

    def trainable_parameters(self):
        for m in self.trainable_modules():
            yield from m.parameters()

    def train(self) -> None:
        for m in (self.student, self.teacher, self.cell_head, self.wsi_head):
            m.train()

    def eval(self) -> None:
        for m in (self.student, self.teacher, self.cell_head, self.wsi_head):
            m.eval()
        if self.text_encoder is not None:
            self.text_encoder.eval()


def images_to_tensor(images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """(B, H, W, 3) float arrays in [0,1] -> (B, 3, H, W) float32 tensor."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        t = torch.from_numpy(np.ascontiguousarray(images))
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).contiguous().float()


def encode_cells(images: np.ndarray | torch.Tensor, encoder: CellEncoder) -> torch.Tensor:
    """Batch of cell tiles -> (B, D) features."""
    x = images_to_tensor(images) if (isinstance(images, np.ndarray) or images.shape[-1] == 3) else images.float()
    z = encoder(x)
    if not torch.isfinite(z).all():
        raise FloatingPointError("non-finite cell features")
    return z


def cell_classify(z: torch.Tensor, head: CellHead) -> Tuple[torch.Tensor, torch.Tensor]:
    """Features -> (class probabilities, positive-likeness score = 1 - P(normal))."""
    if not torch.isfinite(z).all():
        raise FloatingPointError("non-finite features")
    probs = torch.softmax(head(z), dim=-1)
    return probs, 1.0 - probs[..., 0]


def wsi_aggregate(z: torch.Tensor, head: AttentionMilHead) -> Tuple[torch.Tensor, torch.Tensor]:
    """Bag features -> (slide logits, attention distribution over instances)."""
    return head(z)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, decay: float) -> None:
    """teacher <- decay * teacher + (1 - decay) * student, elementwise."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher/student parameter sets do not match")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        tp.mul_(decay).add_(sp, alpha=1.0 - decay)


def state_digest(module: nn.Module) -> str:
    """Stable content hash of a module's parameters, for freeze contracts."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(bundle: ModelBundle, path: Path | str, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": {
            "feature_dim": bundle.config.feature_dim,
            "encoder_channels": list(bundle.config.encoder_channels),
            "n_classes": bundle.config.n_classes,
            "n_wsi_classes": bundle.config.n_wsi_classes,
            "attention_hidden": bundle.config.attention_hidden,
            "mlp_widths": list(bundle.config.mlp_widths),
            "dropout": bundle.config.dropout,
        },
        "state": {
            "student": bundle.student.state_dict(),
            "teacher": bundle.teacher.state_dict(),
            "cell_head": bundle.cell_head.state_dict(),
            "wsi_head": bundle.wsi_head.state_dict(),
        },
        "meta": meta or {},
    }
    if bundle.text_encoder is not None:
        payload["state"]["text_encoder"] = bundle.text_encoder.state_dict()
        payload["text_encoder_tokens"] = bundle.text_encoder.n_tokens
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str) -> Tuple[ModelBundle, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('checkpoint_version')}")
    mc = payload["model_config"]
    cfg = ModelConfig(
        feature_dim=mc["feature_dim"],
        encoder_channels=tuple(mc["encoder_channels"]),
        n_classes=mc["n_classes"],
        n_wsi_classes=mc["n_wsi_classes"],
        attention_hidden=mc["attention_hidden"],
        mlp_widths=tuple(mc["mlp_widths"]),
        dropout=mc["dropout"],
    )
    bundle = ModelBundle.create(cfg)
    bundle.student.load_state_dict(payload["state"]["student"])
    bundle.teacher.load_state_dict(payload["state"]["teacher"])
    bundle.cell_head.load_state_dict(payload["state"]["cell_head"])
    bundle.wsi_head.load_state_dict(payload["state"]["wsi_head"])
    if "text_encoder" in payload["state"]:
        from .alignment import SubwordTextEncoder

        bundle.text_encoder = SubwordTextEncoder(cfg.feature_dim)
        bundle.text_encoder.load_state_dict(payload["state"]["text_encoder"])
    return bundle, payload["meta"]
