"""Image/text description alignment for interpretable cell calls.

A small learned text encoder (token embeddings, mean-pooled) maps each fixed
vocabulary entry to the cell feature space. Training minimizes a symmetric
binary cross-entropy on the sigmoid of the cosine-similarity matrix between
cell features and description features, against the multi-hot description
targets; the image encoder stays frozen throughout. At inference a cell is
explained by every description whose cosine similarity exceeds the selection
threshold.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vocabulary import Vocabulary, build_vocabulary

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_OOV_BUCKETS = 64


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


class SubwordTextEncoder(nn.Module):
    """Mean-pooled token embeddings over the fixed description vocabulary.

    Tokens seen in the vocabulary get dedicated embeddings; unseen words fall
    back to hashed character-trigram buckets so arbitrary strings still encode.
    """

    def __init__(self, feature_dim: int, vocab: Optional[Vocabulary] = None):
        super().__init__()
        vocab = vocab or build_vocabulary()
        tokens = sorted({t for entry in vocab.entries for t in tokenize(entry)})
        self.token_ids: Dict[str, int] = {t: i for i, t in enumerate(tokens)}
        self.n_tokens = len(tokens) + _OOV_BUCKETS
        self.embedding = nn.Embedding(self.n_tokens, feature_dim)

    def _ids(self, text: str) -> List[int]:
        ids = []
        for tok in tokenize(text):
            if tok in self.token_ids:
                ids.append(self.token_ids[tok])
            else:
                padded = f"#{tok}#"
                for i in range(max(1, len(padded) - 2)):
                    tri = padded[i : i + 3]
                    ids.append(len(self.token_ids) + (zlib.crc32(tri.encode()) % _OOV_BUCKETS))
        return ids or [len(self.token_ids)]

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            ids = torch.as_tensor(self._ids(text), dtype=torch.long)
            rows.append(self.embedding(ids).mean(dim=0))
        return torch.stack(rows, dim=0)


def encode_descriptions(vocab: Vocabulary, encoder: SubwordTextEncoder) -> torch.Tensor:
    """All vocabulary entries -> (N, D) features, deterministic given params."""
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    return encoder(vocab.entries)


def cosine_matrix(v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarities: (bs, D) x (N, D) -> (bs, N)."""
    v_norm = v.norm(dim=1, keepdim=True)
    t_norm = t.norm(dim=1, keepdim=True)
    if bool((v_norm <= 0).any()) or bool((t_norm <= 0).any()):
        raise ValueError("zero-norm feature row")
    return (v / v_norm) @ (t / t_norm).T


def alignment_loss(v: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Symmetric sigmoid-BCE on the cosine matrix against the multi-hot targets.

    Both directions are computed literally (cells-to-descriptions and its
    transpose against the transposed targets).
    """
    if y.shape != (v.shape[0], t.shape[0]):
        raise ValueError(f"targets must be (bs, N) = ({v.shape[0]}, {t.shape[0]}), got {tuple(y.shape)}")
    sims = cosine_matrix(v, t)
    y = y.to(sims.dtype)
    return F.binary_cross_entropy_with_logits(sims, y) + F.binary_cross_entropy_with_logits(sims.T, y.T)


def select_descriptions(v: torch.Tensor, t: torch.Tensor, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Indices (in vocabulary order) of descriptions with cosine similarity
    strictly greater than the threshold, plus all similarities."""
    if not -1.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (-1, 1), got {threshold}")
    if v.ndim == 1:
        v = v.unsqueeze(0)
    sims = cosine_matrix(v, t).squeeze(0).detach().cpu().numpy()
    return np.flatnonzero(sims > threshold), sims


def describe(v: torch.Tensor, t: torch.Tensor, threshold: float, vocab: Vocabulary) -> List[Tuple[str, float]]:
    idx, sims = select_descriptions(v, t, threshold)
    return [(vocab.entries[i], float(sims[i])) for i in idx]


def description_micro_f1(v: torch.Tensor, t: torch.Tensor, y: np.ndarray, threshold: float) -> float:
    """Micro-averaged F1 of thresholded description selection over all
    (cell, description) decisions."""
    sims = cosine_matrix(v, t).detach().cpu().numpy()
    pred = sims > threshold
    truth = np.asarray(y, dtype=bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    denom = 2 * tp + fp + fn
    return (2.0 * tp / denom) if denom else 1.0


@dataclass(frozen=True)
class AlignConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    holdout_fraction: float = 0.2
    lambda_select: float = 0.5

    def validate(self) -> None:
        if not -1.0 < self.lambda_select < 1.0:
            raise ValueError("lambda_select must be in (-1, 1)")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")


def train_text_alignment(
    features: torch.Tensor,
    targets: np.ndarray,
    config: AlignConfig,
    rng: np.random.Generator,
    vocab: Optional[Vocabulary] = None,
    text_encoder: Optional[SubwordTextEncoder] = None,
) -> Tuple[SubwordTextEncoder, dict]:
    """Fit the text encoder against frozen cell features.

    ``features`` are precomputed (bs, D) cell embeddings; ``targets`` the
    matching multi-hot matrix. Returns the trained encoder and a history with
    per-epoch loss and held-out micro-F1.
    """
    config.validate()
    vocab = vocab or build_vocabulary()
    n = features.shape[0]
    if n == 0:
        raise ValueError("no description-labelled cells to train on")
    if targets.shape != (n, len(vocab)):
        raise ValueError(f"targets must be ({n}, {len(vocab)}), got {targets.shape}")
    features = features.detach()
    targets_t = torch.as_tensor(np.asarray(targets), dtype=torch.float32)

    perm = rng.permutation(n)
    n_hold = int(round(config.holdout_fraction * n))
    hold_idx = perm[:n_hold]
    train_idx = perm[n_hold:]
    if len(train_idx) == 0:
        raise ValueError("holdout fraction leaves no training cells")

    encoder = text_encoder or SubwordTextEncoder(features.shape[1], vocab)
    optimizer = torch.optim.AdamW(encoder.parameters(), lr=config.learning_rate)
    history = {"loss": [], "holdout_micro_f1": []}
    for _ in range(config.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            t_feats = encode_descriptions(vocab, encoder)
            loss = alignment_loss(features[batch], t_feats, targets_t[batch])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        history["loss"].append(float(np.mean(epoch_losses)))
        if len(hold_idx):
            with torch.no_grad():
                t_feats = encode_descriptions(vocab, encoder)
                f1 = description_micro_f1(
                    features[hold_idx], t_feats, targets[hold_idx], config.lambda_select
                )
            history["holdout_micro_f1"].append(f1)
    return encoder, history
