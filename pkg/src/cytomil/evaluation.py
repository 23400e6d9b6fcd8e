"""Slide-level inference and metric reports.

Inference distills each slide to its top-K positive-like cells and classifies
the bag with the attention head. Reports carry the binary AUC, the operating
point at the target sensitivity, macro F1, confusion matrix, per-domain
breakdowns, and (when the oracle sidecar exists) the top-K recall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .bags import topk_select
from .manifest import LATENTS_NAME, Manifest, TileStore, load_latents
from .metrics import (
    binary_score,
    confusion_matrix,
    f1_macro,
    roc_auc,
    specificity_at_sensitivity,
    topk_recall,
)
from .models import ModelBundle, cell_classify
from .taxonomy import CLASS_NAMES, N_CLASSES


@dataclass
class BagInference:
    wsi_id: str
    label: int
    domain: str
    wsi_probs: np.ndarray  # slide-head class distribution
    binary: float  # 1 - P(normal) from the slide head
    pred_class: int
    attention: np.ndarray
    topk_indices: np.ndarray
    cell_scores: np.ndarray  # positive-likeness per cell (full bag)
    cell_probs_topk: np.ndarray


@dataclass
class MetricsReport:
    split: str
    n_wsi: int
    k: int
    auc_binary: Optional[float]
    sensitivity_target: float
    achieved_sensitivity: Optional[float]
    specificity: Optional[float]
    threshold: Optional[float]
    f1_macro: float
    confusion: List[List[int]]
    class_counts: Dict[str, int]
    per_domain: Dict[str, dict] = field(default_factory=dict)
    topk_recall: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_wsi": self.n_wsi,
            "k": self.k,
            "auc_binary": self.auc_binary,
            "specificity_at_sensitivity": {
                "target": self.sensitivity_target,
                "achieved_sensitivity": self.achieved_sensitivity,
                "specificity": self.specificity,
                "threshold": self.threshold,
            },
            "f1_macro": self.f1_macro,
            "confusion_matrix": self.confusion,
            "class_counts": self.class_counts,
            "per_domain": self.per_domain,
            "topk_recall": self.topk_recall,
        }

    def render_text(self) -> str:
        lines = [
            f"split: {self.split}  slides: {self.n_wsi}  top-k: {self.k}",
            f"binary AUC: {self.auc_binary if self.auc_binary is not None else 'n/a'}",
            f"specificity @ sensitivity>={self.sensitivity_target}: "
            f"{self.specificity} (achieved sensitivity {self.achieved_sensitivity}, threshold {self.threshold})",
            f"macro F1: {self.f1_macro:.4f}",
        ]
        if self.topk_recall is not None:
            lines.append(f"top-k recall (oracle): {self.topk_recall:.4f}")
        header = "true\\pred " + " ".join(f"{n:>10}" for n in CLASS_NAMES)
        lines.append(header)
        for name, row in zip(CLASS_NAMES, self.confusion):
            lines.append(f"{name:>10} " + " ".join(f"{v:>10d}" for v in row))
        for domain, sub in sorted(self.per_domain.items()):
            lines.append(f"domain {domain}: n={sub['n_wsi']} auc={sub['auc_binary']} spec={sub['specificity']}")
        return "\n".join(lines)


def maxpool_predict(cell_probs: np.ndarray) -> Tuple[int, float]:
    """Max-pooling inference over per-cell class distributions.

    Pools probabilities elementwise over instances and takes the argmax class;
    the binary score is the best per-cell positive score.
    """
    p = np.asarray(cell_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"cell_probs must be (N, C), got {p.shape}")
    pooled = p.max(axis=0)
    return int(pooled.argmax()), float((1.0 - p[:, 0]).max())


@torch.no_grad()
def infer_bag(
    bundle: ModelBundle,
    images: Sequence[np.ndarray],
    k: int,
    batch: int = 256,
) -> Tuple[np.ndarray, float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Top-K distillation + attention head on one slide's cell tiles.

    Returns (wsi_probs, binary, attention, topk_idx, cell_scores, cell_probs_topk).
    """
    feats = []
    probs = []
    for start in range(0, len(images), batch):
        chunk = np.stack(images[start : start + batch])
        z = bundle.student(torch.from_numpy(chunk).permute(0, 3, 1, 2).contiguous().float())
        p, _ = cell_classify(z, bundle.cell_head)
        feats.append(z)
        probs.append(p.numpy())
    z_all = torch.cat(feats, dim=0)
    cell_probs = np.concatenate(probs, axis=0)
    scores = 1.0 - cell_probs[:, 0]
    top = topk_select(scores, min(k, len(scores)))
    logits, attention = bundle.wsi_head(z_all[torch.as_tensor(np.asarray(top))])
    wsi_probs = torch.softmax(logits, dim=-1).numpy()
    return wsi_probs, float(binary_score(wsi_probs)), attention.numpy(), top, scores, cell_probs[top]


def _subset_metrics(inferences: List[BagInference], sens_target: float, include_absent: bool) -> dict:
    bin_labels = np.asarray([int(b.label > 0) for b in inferences])
    bin_scores = np.asarray([b.binary for b in inferences])
    out: dict = {"n_wsi": len(inferences), "auc_binary": None, "specificity": None,
                 "achieved_sensitivity": None, "threshold": None}
    if len(np.unique(bin_labels)) == 2:
        out["auc_binary"] = roc_auc(bin_scores, bin_labels)
        spec, thr = specificity_at_sensitivity(bin_scores, bin_labels, sens_target)
        out["specificity"] = spec
        out["threshold"] = thr
        out["achieved_sensitivity"] = float((bin_scores[bin_labels == 1] >= thr).mean())
    return out


def evaluate(
    bundle: ModelBundle,
    manifest: Manifest,
    split: str,
    k: int,
    sensitivity_target: float = 0.95,
    include_absent_classes: bool = False,
    cache_tiles: bool = False,
) -> MetricsReport:
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    bundle.eval()
    store = TileStore(manifest.root, cache=cache_tiles)
    inferences: List[BagInference] = []
    for rec in records:
        images = [store.get(c.path) for c in rec.cells]
        wsi_probs, binary, attention, top, scores, cell_probs_topk = infer_bag(bundle, images, k)
        inferences.append(
            BagInference(
                wsi_id=rec.wsi_id,
                label=rec.label,
                domain=rec.domain,
                wsi_probs=wsi_probs,
                binary=binary,
                pred_class=int(wsi_probs.argmax()),
                attention=attention,
                topk_indices=top,
                cell_scores=scores,
                cell_probs_topk=cell_probs_topk,
            )
        )

    overall = _subset_metrics(inferences, sensitivity_target, include_absent_classes)
    preds = [b.pred_class for b in inferences]
    trues = [b.label for b in inferences]
    cm = confusion_matrix(preds, trues, N_CLASSES)
    per_domain = {}
    for domain in sorted({b.domain for b in inferences}):
        sub = [b for b in inferences if b.domain == domain]
        per_domain[domain] = _subset_metrics(sub, sensitivity_target, include_absent_classes)

    tk_recall = None
    if (manifest.root / LATENTS_NAME).exists():
        latents = load_latents(manifest.root)
        pos_bags = [b for b in inferences if b.label > 0]
        if pos_bags:
            tk_recall = topk_recall(
                [b.cell_scores for b in pos_bags],
                [latents[b.wsi_id] for b in pos_bags],
                k,
            )

    counts = {CLASS_NAMES[c]: int((np.asarray(trues) == c).sum()) for c in range(N_CLASSES)}
    return MetricsReport(
        split=split,
        n_wsi=len(inferences),
        k=k,
        auc_binary=overall["auc_binary"],
        sensitivity_target=sensitivity_target,
        achieved_sensitivity=overall["achieved_sensitivity"],
        specificity=overall["specificity"],
        threshold=overall["threshold"],
        f1_macro=f1_macro(preds, trues, N_CLASSES, include_absent=include_absent_classes),
        confusion=cm.tolist(),
        class_counts=counts,
        per_domain=per_domain,
        topk_recall=tk_recall,
    )


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> List[dict]:
    """(threshold, TPR, FPR) triplets over all distinct thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    points = []
    for t in np.unique(s):
        points.append(
            {
                "threshold": float(t),
                "tpr": float((s[y] >= t).mean()),
                "fpr": float((s[~y] >= t).mean()),
            }
        )
    return points


def write_report(report: MetricsReport, out_dir: Path, roc: Optional[List[dict]] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"metrics_{report.split}.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=1))
    (out_dir / f"metrics_{report.split}.txt").write_text(report.render_text() + "\n")
    if roc is not None:
        (out_dir / f"roc_{report.split}.json").write_text(json.dumps(roc))
    return json_path
