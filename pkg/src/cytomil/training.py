"""Training loops tying the corpus to the model: supervised cell warm start,
the semi-weak end-to-end phase, and the color-adversarial fine-tune phase.

One trainer owns all mutable parameters. Data sampling and augmentation run
from explicit seeded generators, and a deterministic mode pins torch to
single-threaded deterministic kernels so identical configs reproduce logs
byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import augment_strong, augment_weak
from .bags import topk_select
from .coloradv import ColorAdvConfig, coloradv_batch_loss
from .manifest import Manifest, TileStore
from .models import ModelBundle, ModelConfig, cell_classify, images_to_tensor
from .swift import SwiftConfig, WsiTrainingBatch, swift_step


def set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


@dataclass
class BagData:
    wsi_id: str
    label: int
    domain: str
    paths: List[str]


@dataclass
class TrainData:
    """Materialized train-split pools: visible-labelled cells and slide bags."""

    store: TileStore
    labelled_paths: List[str]
    labelled_targets: np.ndarray
    bags: List[BagData]

    @classmethod
    def from_manifest(cls, manifest: Manifest, cache_tiles: bool = True) -> "TrainData":
        store = TileStore(manifest.root, cache=cache_tiles)
        paths: List[str] = []
        targets: List[int] = []
        bags: List[BagData] = []
        for rec in manifest.split("train"):
            for cell in rec.cells:
                if cell.label is not None:
                    paths.append(cell.path)
                    targets.append(cell.label)
            bags.append(BagData(rec.wsi_id, rec.label, rec.domain, [c.path for c in rec.cells]))
        return cls(store=store, labelled_paths=paths, labelled_targets=np.asarray(targets, dtype=np.int64), bags=bags)

    def labelled_images(self, idx: Sequence[int]) -> np.ndarray:
        return np.stack([self.store.get(self.labelled_paths[i]) for i in idx])


class JsonlLogger:
    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record) + "\n")


def class_weights(targets: np.ndarray, n_classes: int) -> torch.Tensor:
    """Inverse-frequency weights over classes present in the labelled pool."""
    counts = np.bincount(targets, minlength=n_classes).astype(np.float64)
    weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    present = weights > 0
    if present.any():
        weights = weights / weights[present].mean()
    return torch.as_tensor(weights, dtype=torch.float32)


def pretrain_cell_classifier(
    data: TrainData,
    model_cfg: ModelConfig,
    swift_cfg: SwiftConfig,
    rng: np.random.Generator,
    log: Optional[JsonlLogger] = None,
) -> ModelBundle:
    """Supervised warm start on all visibly annotated cells (weak augmentation,
    inverse-frequency class weights against the heavy NILM skew)."""
    if len(data.labelled_paths) == 0:
        raise ValueError("no labelled cells in the train split; cannot pretrain")
    bundle = ModelBundle.create(model_cfg)
    bundle.train()
    params = list(bundle.student.parameters()) + list(bundle.cell_head.parameters())
    optimizer = torch.optim.Adam(params, lr=swift_cfg.learning_rate, weight_decay=swift_cfg.weight_decay)
    schedule = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda it: 1.0 - it / max(1, swift_cfg.pretrain_iterations)
    )
    weights = class_weights(data.labelled_targets, model_cfg.n_classes)
    n = len(data.labelled_paths)
    batch = min(swift_cfg.cell_batch_size, n)
    for it in range(swift_cfg.pretrain_iterations):
        idx = rng.choice(n, size=batch, replace=n < batch)
        images = np.stack([augment_weak(img, rng) for img in data.labelled_images(idx)])
        targets = torch.as_tensor(data.labelled_targets[idx], dtype=torch.long)
        logits = bundle.cell_head(bundle.student(images_to_tensor(images)))
        loss = F.cross_entropy(logits, targets, weight=weights)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        schedule.step()
        if log:
            log.write({"iter": it, "loss": float(loss.detach())})
    # Fresh EMA start: the teacher tracks the warm-started student.
    bundle.teacher.load_state_dict(bundle.student.state_dict())
    bundle.eval()
    return bundle


@torch.no_grad()
def score_bag_cells(bundle: ModelBundle, store: TileStore, paths: Sequence[str], batch: int = 256) -> np.ndarray:
    """Positive-likeness score of every listed cell, eval mode."""
    scores = []
    for start in range(0, len(paths), batch):
        imgs = np.stack([store.get(p) for p in paths[start : start + batch]])
        _, pos = cell_classify(bundle.student(images_to_tensor(imgs)), bundle.cell_head)
        scores.append(pos.numpy())
    return np.concatenate(scores)


class BagSampler:
    """Cycles train bags in shuffled order and maintains top-K membership,
    re-ranked with the current student every ``refresh_every_epochs`` passes."""

    def __init__(self, bundle: ModelBundle, data: TrainData, swift_cfg: SwiftConfig, rng: np.random.Generator):
        self.bundle = bundle
        self.data = data
        self.cfg = swift_cfg
        self.rng = rng
        bags_per_epoch = max(1, math.ceil(len(data.bags) / swift_cfg.wsi_batch_size))
        self.refresh_every = max(1, swift_cfg.refresh_every_epochs) * bags_per_epoch
        self.step = 0
        self.order = rng.permutation(len(data.bags))
        self.cursor = 0
        self.members = self._rank()

    def _rank(self) -> List[np.ndarray]:
        was_training = self.bundle.student.training
        self.bundle.eval()
        members = []
        for bag in self.data.bags:
            scores = score_bag_cells(self.bundle, self.data.store, bag.paths)
            members.append(topk_select(scores, min(self.cfg.bag_size, len(scores))))
        if was_training:
            self.bundle.train()
        return members

    def next_indices(self) -> np.ndarray:
        if self.step > 0 and self.step % self.refresh_every == 0:
            self.members = self._rank()
        self.step += 1
        if self.cursor + self.cfg.wsi_batch_size > len(self.order):
            self.order = self.rng.permutation(len(self.data.bags))
            self.cursor = 0
        chosen = self.order[self.cursor : self.cursor + self.cfg.wsi_batch_size]
        self.cursor += self.cfg.wsi_batch_size
        return chosen

    def training_batch(self) -> List[WsiTrainingBatch]:
        out = []
        for bi in self.next_indices():
            bag = self.data.bags[bi]
            tiles = [self.data.store.get(bag.paths[int(i)]) for i in self.members[bi]]
            strong = np.stack([augment_strong(t, self.rng) for t in tiles])
            weak = np.stack([augment_weak(t, self.rng) for t in tiles])
            out.append(WsiTrainingBatch(strong=strong, weak=weak, label=bag.label))
        return out

    def clean_batch(self):
        """Un-augmented tiles for the adversarial stream: (stacked images,
        per-bag sizes, labels)."""
        tiles, sizes, labels = [], [], []
        for bi in self.next_indices():
            bag = self.data.bags[bi]
            imgs = [self.data.store.get(bag.paths[int(i)]) for i in self.members[bi]]
            tiles.extend(imgs)
            sizes.append(len(imgs))
            labels.append(bag.label)
        return images_to_tensor(np.stack(tiles)), sizes, labels


def _linear_decay(optimizer: torch.optim.Optimizer, total: int):
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda it: 1.0 - it / max(1, total))


def train_swift_phase(
    bundle: ModelBundle,
    data: TrainData,
    swift_cfg: SwiftConfig,
    rng: np.random.Generator,
    log: Optional[JsonlLogger] = None,
) -> ModelBundle:
    """The semi-weak end-to-end loop. Returns the same bundle, trained."""
    swift_cfg.validate()
    if not data.bags:
        raise ValueError("train split has no slides")
    if swift_cfg.freeze_encoder:
        for p in bundle.student.parameters():
            p.requires_grad_(False)
    params = [p for p in bundle.trainable_parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=swift_cfg.learning_rate, weight_decay=swift_cfg.weight_decay)
    schedule = _linear_decay(optimizer, swift_cfg.iterations)
    sampler = BagSampler(bundle, data, swift_cfg, rng)
    bundle.train()

    n_lab = len(data.labelled_paths)
    use_cells = swift_cfg.enable_cell_stream and n_lab > 0
    for it in range(swift_cfg.iterations):
        wsi_batch = sampler.training_batch()
        if use_cells:
            idx = rng.choice(
                n_lab, size=min(swift_cfg.cell_batch_size, n_lab), replace=n_lab < swift_cfg.cell_batch_size
            )
            lab_imgs = np.stack([augment_strong(img, rng) for img in data.labelled_images(idx)])
            lab_targets = data.labelled_targets[idx]
        else:
            lab_imgs, lab_targets = None, None
        stats = swift_step(lab_imgs, lab_targets, wsi_batch, bundle, optimizer, swift_cfg)
        schedule.step()
        if log:
            log.write({"iter": it, **stats})
    bundle.eval()
    return bundle


def coloradv_finetune_phase(
    bundle: ModelBundle,
    data: TrainData,
    swift_cfg: SwiftConfig,
    adv_cfg: ColorAdvConfig,
    rng: np.random.Generator,
    log: Optional[JsonlLogger] = None,
) -> ModelBundle:
    """Slide-level min-max fine-tune on a mixture of color-adversarial and
    clean bags. Optimizes the encoder and the slide head."""
    adv_cfg.validate()
    params = list(bundle.student.parameters()) + list(bundle.wsi_head.parameters())
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(
        params, lr=swift_cfg.learning_rate * 0.5, weight_decay=swift_cfg.weight_decay
    )
    schedule = _linear_decay(optimizer, adv_cfg.iterations)
    sampler = BagSampler(bundle, data, swift_cfg, rng)
    bundle.train()
    for it in range(adv_cfg.iterations):
        images, sizes, labels = sampler.clean_batch()
        loss, r_adv, space = coloradv_batch_loss(
            images, _slide_loss_fn(bundle, sizes, labels), adv_cfg, rng
        )
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite color-adversarial loss at iteration {it}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        schedule.step()
        if log:
            log.write(
                {
                    "iter": it,
                    "loss": float(loss.detach()) / max(1, len(sizes)),
                    "space": space,
                    "r_norm": float(r_adv.norm(dim=1).mean()),
                }
            )
    bundle.eval()
    return bundle


def _slide_loss_fn(bundle: ModelBundle, sizes: Sequence[int], labels: Sequence[int]):
    label_t = torch.as_tensor(labels, dtype=torch.long)

    def slide_loss(batch_images: torch.Tensor) -> torch.Tensor:
        z = bundle.student(batch_images)
        total = z.new_zeros(())
        offset = 0
        for j, size in enumerate(sizes):
            logits, _ = bundle.wsi_head(z[offset : offset + size])
            total = total + F.cross_entropy(logits.unsqueeze(0), label_t[j : j + 1])
            offset += size
        return total

    return slide_loss


def interleaved_phase(
    bundle: ModelBundle,
    data: TrainData,
    swift_cfg: SwiftConfig,
    adv_cfg: ColorAdvConfig,
    rng: np.random.Generator,
    log: Optional[JsonlLogger] = None,
    adv_log: Optional[JsonlLogger] = None,
) -> ModelBundle:
    """Alternate one semi-weak step with one color-adversarial step."""
    swift_cfg.validate()
    adv_cfg.validate()
    params = [p for p in bundle.trainable_parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=swift_cfg.learning_rate, weight_decay=swift_cfg.weight_decay)
    schedule = _linear_decay(optimizer, swift_cfg.iterations)
    sampler = BagSampler(bundle, data, swift_cfg, rng)
    bundle.train()
    n_lab = len(data.labelled_paths)
    use_cells = swift_cfg.enable_cell_stream and n_lab > 0
    for it in range(swift_cfg.iterations):
        wsi_batch = sampler.training_batch()
        if use_cells:
            idx = rng.choice(
                n_lab, size=min(swift_cfg.cell_batch_size, n_lab), replace=n_lab < swift_cfg.cell_batch_size
            )
            lab_imgs = np.stack([augment_strong(img, rng) for img in data.labelled_images(idx)])
            lab_targets = data.labelled_targets[idx]
        else:
            lab_imgs, lab_targets = None, None
        stats = swift_step(lab_imgs, lab_targets, wsi_batch, bundle, optimizer, swift_cfg)
        if log:
            log.write({"iter": it, **stats})

        images, sizes, labels = sampler.clean_batch()
        adv_loss, _, space = coloradv_batch_loss(images, _slide_loss_fn(bundle, sizes, labels), adv_cfg, rng)
        optimizer.zero_grad(set_to_none=True)
        adv_loss.backward()
        optimizer.step()
        schedule.step()
        if adv_log:
            adv_log.write({"iter": it, "loss": float(adv_loss.detach()) / max(1, len(sizes)), "space": space})
    bundle.eval()
    return bundle
