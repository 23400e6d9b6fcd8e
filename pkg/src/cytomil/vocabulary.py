"""Fixed vocabulary of diagnostic cell descriptions.

Descriptions are grouped by cell class; several strings are shared between
classes (e.g. chromatin and membrane findings), so the flat entry list is
deduplicated in first-seen order. Glandular lesions are covered by a single
consolidated descriptor. The multi-hot targets used everywhere index into
``Vocabulary.entries``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .taxonomy import AGC, ASC_H_HSIL, ASC_US, LSIL, N_CLASSES, NILM

VOCABULARY_VERSION = 1
VOCABULARY_NAME = "vocabulary.json"

DESCRIPTION_TABLE: Dict[int, Tuple[str, ...]] = {
    NILM: ("normal cell",),
    ASC_US: (
        "nuclear enlargement to 2.5-3 times",
        "irregular nuclear membrane or contour",
        "mild hyperchromasia, mildly darker than normal staining pattern in the nucleus",
        "coarsely granular chromatin pattern",
    ),
    LSIL: (
        "nuclear enlargement of more than 3 times",
        "binucleation or multinucleation cell",
        "coarsely granular chromatin pattern",
        "irregular nuclear membrane or contour",
        "marked nuclear dyskaryosis (raisinoid nuclei)",
        "perinuclear halo or cytoplasmic vacuolization",
        "hyperchromasia, darker than normal staining pattern in the nucleus",
    ),
    ASC_H_HSIL: (
        "high nuclear-cytoplasmic ratio",
        "hyperchromasia, darker than normal staining pattern in the nucleus",
        "irregular nuclear membrane or contour",
        "coarsely granular chromatin pattern",
        "cellular pleomorphism and disordered arrangement",
    ),
    AGC: ("atypical glandular cells",),
}


@dataclass(frozen=True)
class Vocabulary:
    entries: Tuple[str, ...]
    class_entries: Dict[int, Tuple[int, ...]]  # class id -> entry indices
    version: int = VOCABULARY_VERSION

    def __len__(self) -> int:
        return len(self.entries)

    def index(self, description: str) -> int:
        try:
            return self.entries.index(description)
        except ValueError:
            raise KeyError(f"description not in vocabulary: {description!r}") from None

    def multihot(self, descriptions: Sequence[str]) -> List[int]:
        vec = [0] * len(self.entries)
        for d in descriptions:
            vec[self.index(d)] = 1
        return vec

    def active(self, multihot: Sequence[int]) -> List[str]:
        return [self.entries[i] for i, v in enumerate(multihot) if v]


def build_vocabulary() -> Vocabulary:
    entries: List[str] = []
    class_entries: Dict[int, Tuple[int, ...]] = {}
    for cls in range(N_CLASSES):
        idxs = []
        for desc in DESCRIPTION_TABLE[cls]:
            if desc not in entries:
                entries.append(desc)
            idxs.append(entries.index(desc))
        class_entries[cls] = tuple(idxs)
    return Vocabulary(entries=tuple(entries), class_entries=class_entries)


def save_vocabulary(vocab: Vocabulary, path: Path | str) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / VOCABULARY_NAME
    payload = {
        "vocabulary_version": vocab.version,
        "classes": {str(cls): [vocab.entries[i] for i in idxs] for cls, idxs in vocab.class_entries.items()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1))
    return path


def load_vocabulary(path: Path | str) -> Vocabulary:
    path = Path(path)
    if path.is_dir():
        path = path / VOCABULARY_NAME
    raw = json.loads(path.read_text())
    entries: List[str] = []
    class_entries: Dict[int, Tuple[int, ...]] = {}
    for cls_str, descs in raw["classes"].items():
        idxs = []
        for desc in descs:
            if desc not in entries:
                entries.append(desc)
            idxs.append(entries.index(desc))
        class_entries[int(cls_str)] = tuple(idxs)
    if not entries:
        raise ValueError(f"vocabulary at {path} is empty")
    return Vocabulary(entries=tuple(entries), class_entries=class_entries, version=raw["vocabulary_version"])
