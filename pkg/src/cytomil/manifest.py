"""Corpus manifest schema, validation, and tile I/O.

A corpus directory contains::

    manifest.json            public index of slides and cell tiles
    vocabulary.json          description vocabulary (see alignment module)
    latents.json             oracle-only ground truth; trainers never read it
    tiles/<wsi_id>/<idx>.png lossless RGB cell tiles

Splits are disjoint by wsi_id. Cell labels and description multi-hots are
optional per cell: in the train split only the annotated subset carries them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .taxonomy import N_CLASSES, TAXONOMY_VERSION

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
LATENTS_NAME = "latents.json"
SPLITS = ("train", "val", "test", "shifted-test")


class ManifestError(Exception):
    """Base class for manifest loading failures."""


class MissingManifestError(ManifestError):
    pass


class MalformedRecordError(ManifestError):
    pass


@dataclass
class CellEntry:
    path: str
    label: Optional[int] = None
    description_labels: Optional[List[int]] = None


@dataclass
class WsiRecord:
    wsi_id: str
    label: int
    domain: str
    split: str
    cells: List[CellEntry]


@dataclass
class Manifest:
    records: List[WsiRecord]
    tile_size: int
    root: Path
    manifest_version: int = MANIFEST_VERSION
    taxonomy_version: int = TAXONOMY_VERSION
    vocabulary_version: int = 1
    generator: dict = field(default_factory=dict)

    def split(self, name: str) -> List[WsiRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def record(self, wsi_id: str) -> WsiRecord:
        for r in self.records:
            if r.wsi_id == wsi_id:
                return r
        raise KeyError(f"no record for wsi_id {wsi_id!r}")


@dataclass
class Violation:
    kind: str  # dangling-path | split-overlap | bad-label | bad-split | bad-descriptions
    message: str
    wsi_id: Optional[str] = None


@dataclass
class ValidationReport:
    violations: List[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return "manifest valid: 0 violations"
        lines = [f"manifest invalid: {len(self.violations)} violation(s)"]
        lines += [f"  [{v.kind}] {v.message}" for v in self.violations]
        return "\n".join(lines)


def _parse_cell(raw: dict, wsi_id: str) -> CellEntry:
    if not isinstance(raw, dict) or "path" not in raw:
        raise MalformedRecordError(f"wsi {wsi_id!r}: cell entry missing 'path': {raw!r}")
    label = raw.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool)):
        raise MalformedRecordError(f"wsi {wsi_id!r}: cell label must be int or null, got {label!r}")
    desc = raw.get("description_labels")
    if desc is not None and not (isinstance(desc, list) and all(v in (0, 1) for v in desc)):
        raise MalformedRecordError(f"wsi {wsi_id!r}: description_labels must be a 0/1 list")
    return CellEntry(path=raw["path"], label=label, description_labels=desc)


def load_manifest(path: Path | str) -> Manifest:
    """Parse a manifest file. The corpus root is the manifest's directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise MissingManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedRecordError(f"manifest is not valid JSON: {e}") from e
    for key in ("manifest_version", "tile_size", "records"):
        if key not in raw:
            raise MalformedRecordError(f"manifest missing required key {key!r}")
    records = []
    for rec in raw["records"]:
        if not isinstance(rec, dict):
            raise MalformedRecordError(f"record is not an object: {rec!r}")
        missing = [k for k in ("wsi_id", "label", "domain", "split", "cells") if k not in rec]
        if missing:
            raise MalformedRecordError(f"record {rec.get('wsi_id')!r} missing keys {missing}")
        cells = [_parse_cell(c, rec["wsi_id"]) for c in rec["cells"]]
        records.append(
            WsiRecord(
                wsi_id=rec["wsi_id"],
                label=rec["label"],
                domain=rec["domain"],
                split=rec["split"],
                cells=cells,
            )
        )
    return Manifest(
        records=records,
        tile_size=raw["tile_size"],
        root=path.parent,
        manifest_version=raw["manifest_version"],
        taxonomy_version=raw.get("taxonomy_version", TAXONOMY_VERSION),
        vocabulary_version=raw.get("vocabulary_version", 1),
        generator=raw.get("generator", {}),
    )


def save_manifest(manifest: Manifest, path: Path | str | None = None) -> Path:
    path = Path(path) if path is not None else manifest.root / MANIFEST_NAME
    payload = {
        "manifest_version": manifest.manifest_version,
        "taxonomy_version": manifest.taxonomy_version,
        "vocabulary_version": manifest.vocabulary_version,
        "tile_size": manifest.tile_size,
        "generator": manifest.generator,
        "records": [
            {
                "wsi_id": r.wsi_id,
                "label": r.label,
                "domain": r.domain,
                "split": r.split,
                "cells": [
                    {
                        "path": c.path,
                        "label": c.label,
                        "description_labels": c.description_labels,
                    }
                    for c in r.cells
                ],
            }
            for r in manifest.records
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1))
    return path


def validate_manifest(manifest: Manifest) -> ValidationReport:
    """Check invariants: valid labels/splits, disjoint splits, existing tiles,
    well-formed description vectors. Returns a report instead of raising so a
    single pass surfaces every problem."""
    violations: List[Violation] = []
    seen: Dict[str, str] = {}
    desc_len: Optional[int] = None
    for rec in manifest.records:
        if rec.split not in SPLITS:
            violations.append(
                Violation("bad-split", f"wsi {rec.wsi_id!r} has unknown split {rec.split!r}", rec.wsi_id)
            )
        if not isinstance(rec.label, int) or not 0 <= rec.label < N_CLASSES:
            violations.append(
                Violation("bad-label", f"wsi {rec.wsi_id!r} has invalid label {rec.label!r}", rec.wsi_id)
            )
        if rec.wsi_id in seen:
            violations.append(
                Violation(
                    "split-overlap",
                    f"wsi {rec.wsi_id!r} appears in splits {seen[rec.wsi_id]!r} and {rec.split!r}",
                    rec.wsi_id,
                )
            )
        else:
            seen[rec.wsi_id] = rec.split
        for cell in rec.cells:
            if not (manifest.root / cell.path).exists():
                violations.append(
                    Violation("dangling-path", f"wsi {rec.wsi_id!r}: missing tile {cell.path}", rec.wsi_id)
                )
            if cell.label is not None and not 0 <= cell.label < N_CLASSES:
                violations.append(
                    Violation("bad-label", f"wsi {rec.wsi_id!r}: invalid cell label {cell.label}", rec.wsi_id)
                )
            if cell.description_labels is not None:
                if desc_len is None:
                    desc_len = len(cell.description_labels)
                elif len(cell.description_labels) != desc_len:
                    violations.append(
                        Violation(
                            "bad-descriptions",
                            f"wsi {rec.wsi_id!r}: description vector length "
                            f"{len(cell.description_labels)} != {desc_len}",
                            rec.wsi_id,
                        )
                    )
    return ValidationReport(violations)


def annotation_stats(manifest: Manifest, split: str = "train") -> dict:
    """Visible-label coverage of the positive and NILM cell populations.

    Uses the oracle sidecar when present (so the denominator counts true
    positives); otherwise falls back to visible labels only.
    """
    latents = load_latents(manifest.root) if (manifest.root / LATENTS_NAME).exists() else None
    n_pos = n_pos_labelled = n_neg = n_neg_labelled = 0
    for rec in manifest.split(split):
        lat = latents.get(rec.wsi_id) if latents else None
        for i, cell in enumerate(rec.cells):
            true_label = lat[i] if lat is not None else cell.label
            if true_label is None:
                continue
            if true_label > 0:
                n_pos += 1
                n_pos_labelled += cell.label is not None
            else:
                n_neg += 1
                n_neg_labelled += cell.label is not None
    return {
        "positive_cells": n_pos,
        "positive_cells_labelled": n_pos_labelled,
        "positive_labelled_fraction": (n_pos_labelled / n_pos) if n_pos else 0.0,
        "negative_cells": n_neg,
        "negative_cells_labelled": n_neg_labelled,
    }


# ---------------------------------------------------------------------------
# Tile and sidecar I/O


def save_tile(pixels: np.ndarray, path: Path) -> None:
    """Write an HxWx3 float [0,1] array as 8-bit lossless PNG."""
    arr = np.clip(np.asarray(pixels, dtype=np.float32), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB")
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")


def load_tile(path: Path) -> np.ndarray:
    """Read a PNG tile back to HxWx3 float32 in [0,1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


class TileStore:
    """Cached uint8 tile access for a corpus directory."""

    def __init__(self, root: Path, cache: bool = True):
        self.root = Path(root)
        self._cache: Dict[str, np.ndarray] = {} if cache else None

    def get(self, rel_path: str) -> np.ndarray:
        """Tile as float32 [0,1]; caches the uint8 representation."""
        if self._cache is not None and rel_path in self._cache:
            raw = self._cache[rel_path]
        else:
            with Image.open(self.root / rel_path) as img:
                raw = np.asarray(img.convert("RGB"), dtype=np.uint8)
            if self._cache is not None:
                self._cache[rel_path] = raw
        return raw.astype(np.float32) / 255.0


def save_latents(root: Path, latents: Dict[str, dict]) -> Path:
    """Write the oracle sidecar: wsi_id -> {labels: [...], descriptions: [[...]]}."""
    path = Path(root) / LATENTS_NAME
    path.write_text(json.dumps(latents))
    return path


def load_latents(root: Path) -> Dict[str, List[int]]:
    """Oracle-only latent cell labels per wsi_id. Not for training code."""
    path = Path(root) / LATENTS_NAME
    raw = json.loads(path.read_text())
    return {k: v["labels"] for k, v in raw.items()}


def load_latent_descriptions(root: Path) -> Dict[str, List[List[int]]]:
    path = Path(root) / LATENTS_NAME
    raw = json.loads(path.read_text())
    return {k: v["descriptions"] for k, v in raw.items()}
