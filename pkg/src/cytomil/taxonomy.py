"""Cervical cytology label taxonomy and bag-label semantics.

Five merged slide/cell classes on an ordinal scale of lesion severity. The
raw reporting categories ASC-H, HSIL and SCC are collapsed into a single
class because they are hard to tell apart at the single-cell level. AGC sits
at the top ordinal so that the max-pooling bag label is total over all
classes; the position of glandular lesions relative to high-grade squamous
ones is a convention of this codebase, not a clinical statement.
"""

from __future__ import annotations

from typing import Iterable, Sequence

NILM = 0
ASC_US = 1
LSIL = 2
ASC_H_HSIL = 3
AGC = 4

N_CLASSES = 5
CLASS_NAMES = ("NILM", "ASC-US", "LSIL", "ASC-H/HSIL", "AGC")
TAXONOMY_VERSION = 1

# Raw reporting labels -> merged ordinal id. ASC-H / HSIL / SCC collapse.
RAW_LABEL_MERGE = {
    "NILM": NILM,
    "ASC-US": ASC_US,
    "LSIL": LSIL,
    "ASC-H": ASC_H_HSIL,
    "HSIL": ASC_H_HSIL,
    "SCC": ASC_H_HSIL,
    "AGC": AGC,
}


class TaxonomyError(ValueError):
    """Unknown raw label or invalid class id."""


def merge_taxonomy(raw_label: str) -> int:
    """Map a raw reporting label to its merged ordinal class id."""
    try:
        return RAW_LABEL_MERGE[raw_label]
    except KeyError:
        raise TaxonomyError(f"unknown raw label: {raw_label!r}") from None


def check_class_id(class_id: int) -> int:
    if not isinstance(class_id, (int,)) or isinstance(class_id, bool):
        raise TaxonomyError(f"class id must be an int, got {class_id!r}")
    if not 0 <= class_id < N_CLASSES:
        raise TaxonomyError(f"class id out of range [0, {N_CLASSES}): {class_id}")
    return class_id


def class_name(class_id: int) -> str:
    return CLASS_NAMES[check_class_id(class_id)]


def bag_label_from_cells(cell_labels: Iterable[int]) -> int:
    """Slide-level label as the ordinal max over per-cell labels."""
    labels = [check_class_id(c) for c in cell_labels]
    if not labels:
        raise TaxonomyError("cannot derive a bag label from an empty cell list")
    return max(labels)


def all_positive_miss_rate(recall: float, n_positive: int) -> float:
    """Probability that every one of ``n_positive`` independent positive cells
    is missed by a per-cell detector with the given recall."""
    if not 0.0 <= recall <= 1.0:
        raise ValueError(f"recall must be in [0, 1], got {recall}")
    if n_positive < 0:
        raise ValueError(f"n_positive must be >= 0, got {n_positive}")
    return (1.0 - recall) ** n_positive


def is_positive(class_id: int) -> bool:
    return check_class_id(class_id) > NILM


def positive_classes() -> Sequence[int]:
    return tuple(range(1, N_CLASSES))
