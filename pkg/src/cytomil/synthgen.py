"""Procedural synthetic cytology corpus.

Cells are parametric ellipse composites (cytoplasm, nucleus, optional halo
ring, chromatin speckles, nuclear clusters) whose class-separating morphology
follows the diagnostic description table: ASC-US nuclei are enlarged to
2.5-3x the normal nucleus radius, LSIL beyond 3x with optional perinuclear
halos, high-grade cells have a high nuclear-cytoplasmic ratio, and glandular
lesions render as multi-nucleus rosette clusters. Stain domains are HSV
affine transforms plus pixel noise, giving a controllable domain shift
between train and shifted-test splits.

Every bag satisfies the max-pooling label rule by construction: the slide
label equals the ordinal max of its cells' latent labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import taxonomy
from .bags import CellImage, WsiBag
from .colorspace import hsv_affine
from .manifest import (
    Manifest,
    CellEntry,
    WsiRecord,
    save_latents,
    save_manifest,
    save_tile,
)
from .taxonomy import AGC, ASC_H_HSIL, ASC_US, LSIL, N_CLASSES, NILM
from .vocabulary import Vocabulary, build_vocabulary, save_vocabulary

# Assumed per-cell detector recall used only for the generator report's
# worst-case all-positives-missed figure.
REPORT_DETECTION_RECALL = 0.989

ATTRIBUTE_DESCRIPTIONS = {
    "normal": "normal cell",
    "enlargement_2p5_3": "nuclear enlargement to 2.5-3 times",
    "enlargement_gt3": "nuclear enlargement of more than 3 times",
    "irregular_membrane": "irregular nuclear membrane or contour",
    "mild_hyperchromasia": "mild hyperchromasia, mildly darker than normal staining pattern in the nucleus",
    "coarse_chromatin": "coarsely granular chromatin pattern",
    "binucleation": "binucleation or multinucleation cell",
    "raisinoid": "marked nuclear dyskaryosis (raisinoid nuclei)",
    "halo": "perinuclear halo or cytoplasmic vacuolization",
    "hyperchromasia": "hyperchromasia, darker than normal staining pattern in the nucleus",
    "high_nc_ratio": "high nuclear-cytoplasmic ratio",
    "pleomorphism": "cellular pleomorphism and disordered arrangement",
    "glandular": "atypical glandular cells",
}


@dataclass(frozen=True)
class StainDomain:
    hue_shift: float = 0.0
    sat_scale: float = 1.0
    val_offset: float = 0.0
    noise_sigma: float = 0.01


DEFAULT_DOMAINS: Dict[str, StainDomain] = {
    "alpha": StainDomain(0.0, 1.0, 0.0, 0.010),
    "beta": StainDomain(-0.04, 0.90, -0.04, 0.014),
    "gamma": StainDomain(0.13, 1.25, 0.08, 0.018),
}


@dataclass(frozen=True)
class RenderSpec:
    """Geometry and attribute probabilities for the parametric cell renderer."""

    tile_size: int = 64
    base_nucleus_radius: float = 0.06  # fraction of tile, normal reference nucleus
    cytoplasm_radius: float = 0.40
    ascus_enlargement: Tuple[float, float] = (2.5, 3.0)
    lsil_enlargement: Tuple[float, float] = (3.2, 4.0)
    hsil_nc_ratio: Tuple[float, float] = (0.72, 0.88)  # nucleus/cytoplasm radius
    hsil_cytoplasm_scale: Tuple[float, float] = (0.45, 0.60)
    agc_cluster_size: Tuple[int, int] = (3, 6)
    lsil_halo_prob: float = 0.6
    lsil_binucleation_prob: float = 0.3
    lsil_hyperchromasia_prob: float = 0.35
    lsil_raisinoid_prob: float = 0.15
    ascus_mild_hyperchromasia_prob: float = 0.6
    irregular_membrane_prob: float = 0.35
    coarse_chromatin_prob: float = 0.35
    hsil_hyperchromasia_prob: float = 0.6
    hsil_pleomorphism_prob: float = 0.25
    domains: Dict[str, StainDomain] = field(default_factory=lambda: dict(DEFAULT_DOMAINS))


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    n_shifted: int = 50
    cells_per_wsi: int = 300
    class_prevalence: Tuple[float, ...] = (0.788, 0.101, 0.050, 0.045, 0.016)
    positive_cell_density: float = 0.05
    lower_grade_rate: float = 0.03
    annotation_budget: float = 0.035
    negative_annotation_budget: float = 0.05
    train_domains: Tuple[str, ...] = ("alpha", "beta")
    shifted_domains: Tuple[str, ...] = ("gamma",)
    seed: int = 0
    render: RenderSpec = field(default_factory=RenderSpec)

    def validate(self) -> None:
        if len(self.class_prevalence) != N_CLASSES:
            raise ValueError(f"class_prevalence needs {N_CLASSES} entries")
        if abs(sum(self.class_prevalence) - 1.0) > 1e-6:
            raise ValueError(f"class_prevalence must sum to 1, got {sum(self.class_prevalence)}")
        if not 0.0 < self.annotation_budget <= 1.0:
            raise ValueError(f"annotation_budget must be in (0, 1], got {self.annotation_budget}")
        if not 0.0 <= self.negative_annotation_budget <= 1.0:
            raise ValueError("negative_annotation_budget must be in [0, 1]")
        if self.cells_per_wsi < 1:
            raise ValueError("cells_per_wsi must be >= 1")
        for d in self.train_domains + self.shifted_domains:
            if d not in self.render.domains:
                raise ValueError(f"domain {d!r} has no stain parameters")


# ---------------------------------------------------------------------------
# Geometry primitives


def _grid(tile: int):
    ys, xs = np.mgrid[0:tile, 0:tile]
    return xs.astype(np.float64) + 0.5, ys.astype(np.float64) + 0.5


def _ellipse_coverage(
    xs,
    ys,
    cx: float,
    cy: float,
    rx: float,
    ry: float,
    angle: float = 0.0,
    wobble_amp: float = 0.0,
    wobble_freq: int = 0,
    wobble_phase: float = 0.0,
    edge: float = 1.2,
) -> np.ndarray:
    """Soft-edged (anti-aliased) ellipse membership in [0,1].

    ``wobble_*`` modulates the boundary radius sinusoidally in polar angle to
    draw irregular membranes.
    """
    dx, dy = xs - cx, ys - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    if wobble_amp > 0.0 and wobble_freq > 0:
        theta = np.arctan2(v, u)
        mod = 1.0 + wobble_amp * np.sin(wobble_freq * theta + wobble_phase)
    else:
        mod = 1.0
    rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2) / mod
    dist = (1.0 - rho) * min(rx, ry)  # approx. signed distance in pixels
    return np.clip(0.5 + dist / edge, 0.0, 1.0)


def _paint(img: np.ndarray, coverage: np.ndarray, color: Sequence[float]) -> None:
    img += coverage[..., None] * (np.asarray(color) - img)


# Canonical (pre-stain) palette.
_BACKGROUND = (0.94, 0.93, 0.95)
_CYTOPLASM = (0.70, 0.84, 0.90)
_NUCLEUS = (0.46, 0.38, 0.66)
_HALO = (0.97, 0.97, 0.98)
_MILD_DARK = 0.82
_FULL_DARK = 0.55


def _nucleus_color(attrs: Dict[str, object]) -> np.ndarray:
    c = np.asarray(_NUCLEUS)
    if attrs.get("hyperchromasia"):
        c = c * _FULL_DARK
    elif attrs.get("mild_hyperchromasia"):
        c = c * _MILD_DARK
    return c


def _draw_nucleus(img, xs, ys, cx, cy, radius, rng, attrs, color) -> None:
    wobble_amp, wobble_freq = 0.0, 0
    if attrs.get("raisinoid"):
        wobble_amp, wobble_freq = 0.30, int(rng.integers(7, 10))
    elif attrs.get("irregular_membrane"):
        wobble_amp, wobble_freq = 0.16, int(rng.integers(4, 7))
    ecc = 1.0
    if attrs.get("pleomorphism"):
        ecc = rng.uniform(1.5, 2.1)
    angle = rng.uniform(0.0, math.pi)
    cov = _ellipse_coverage(
        xs, ys, cx, cy, radius * ecc, radius / ecc, angle,
        wobble_amp, wobble_freq, rng.uniform(0, 2 * math.pi),
    )
    _paint(img, cov, color)
    if attrs.get("coarse_chromatin"):
        # High-contrast speckles confined to the nucleus.
        noise = rng.random(img.shape[:2])
        speckle = ((noise > 0.72) & (cov > 0.6)).astype(np.float64)
        _paint(img, speckle * 0.9, color * 0.45)


def render_cell(
    cell_class: int,
    domain: str,
    rng: np.random.Generator,
    spec: RenderSpec = RenderSpec(),
    vocab: Optional[Vocabulary] = None,
) -> CellImage:
    """Render one cell tile; deterministic given the generator state.

    The returned image carries the latent class and the multi-hot of the
    descriptors that were actually drawn.
    """
    taxonomy.check_class_id(cell_class)
    if domain not in spec.domains:
        raise ValueError(f"unknown stain domain {domain!r}")
    vocab = vocab or build_vocabulary()
    tile = spec.tile_size
    xs, ys = _grid(tile)
    img = np.empty((tile, tile, 3), dtype=np.float64)
    img[...] = _BACKGROUND

    base_r = spec.base_nucleus_radius * tile
    cyto_r = spec.cytoplasm_radius * tile
    cx = tile / 2 + rng.uniform(-0.05, 0.05) * tile
    cy = tile / 2 + rng.uniform(-0.05, 0.05) * tile

    attrs: Dict[str, object] = {}
    if cell_class == NILM:
        attrs["normal"] = True
        nuc_r = base_r * rng.uniform(0.92, 1.08)
        cyto = cyto_r * rng.uniform(0.9, 1.1)
        _paint(img, _ellipse_coverage(xs, ys, cx, cy, cyto, cyto * rng.uniform(0.8, 1.0), rng.uniform(0, math.pi)), _CYTOPLASM)
        _draw_nucleus(img, xs, ys, cx, cy, nuc_r, rng, attrs, _nucleus_color(attrs))
    elif cell_class == ASC_US:
        factor = rng.uniform(*spec.ascus_enlargement)
        attrs["enlargement_2p5_3"] = True
        attrs["enlargement_factor"] = factor
        attrs["mild_hyperchromasia"] = bool(rng.random() < spec.ascus_mild_hyperchromasia_prob)
        attrs["irregular_membrane"] = bool(rng.random() < spec.irregular_membrane_prob)
        attrs["coarse_chromatin"] = bool(rng.random() < spec.coarse_chromatin_prob)
        cyto = cyto_r * rng.uniform(0.9, 1.1)
        _paint(img, _ellipse_coverage(xs, ys, cx, cy, cyto, cyto * rng.uniform(0.8, 1.0), rng.uniform(0, math.pi)), _CYTOPLASM)
        _draw_nucleus(img, xs, ys, cx, cy, base_r * factor, rng, attrs, _nucleus_color(attrs))
    elif cell_class == LSIL:
        factor = rng.uniform(*spec.lsil_enlargement)
        attrs["enlargement_gt3"] = True
        attrs["enlargement_factor"] = factor
        attrs["halo"] = bool(rng.random() < spec.lsil_halo_prob)
        attrs["binucleation"] = bool(rng.random() < spec.lsil_binucleation_prob)
        attrs["hyperchromasia"] = bool(rng.random() < spec.lsil_hyperchromasia_prob)
        attrs["raisinoid"] = bool(rng.random() < spec.lsil_raisinoid_prob)
        if not attrs["raisinoid"]:
            attrs["irregular_membrane"] = bool(rng.random() < spec.irregular_membrane_prob)
        attrs["coarse_chromatin"] = bool(rng.random() < spec.coarse_chromatin_prob)
        nuc_r = base_r * factor
        cyto = max(cyto_r * rng.uniform(0.95, 1.1), nuc_r * 1.55)
        _paint(img, _ellipse_coverage(xs, ys, cx, cy, cyto, cyto * rng.uniform(0.85, 1.0), rng.uniform(0, math.pi)), _CYTOPLASM)
        if attrs["halo"]:
            halo_cov = _ellipse_coverage(xs, ys, cx, cy, nuc_r * 1.5, nuc_r * 1.5, edge=1.6)
            _paint(img, halo_cov, _HALO)
        color = _nucleus_color(attrs)
        if attrs["binucleation"]:
            off = nuc_r * 0.62
            ang = rng.uniform(0, math.pi)
            sub_r = nuc_r / math.sqrt(2.0)
            for s in (-1.0, 1.0):
                _draw_nucleus(
                    img, xs, ys,
                    cx + s * off * math.cos(ang), cy + s * off * math.sin(ang),
                    sub_r, rng, attrs, color,
                )
        else:
            _draw_nucleus(img, xs, ys, cx, cy, nuc_r, rng, attrs, color)
    elif cell_class == ASC_H_HSIL:
        attrs["high_nc_ratio"] = True
        attrs["hyperchromasia"] = bool(rng.random() < spec.hsil_hyperchromasia_prob)
        attrs["irregular_membrane"] = bool(rng.random() < spec.irregular_membrane_prob)
        attrs["coarse_chromatin"] = bool(rng.random() < spec.coarse_chromatin_prob)
        attrs["pleomorphism"] = bool(rng.random() < spec.hsil_pleomorphism_prob)
        cyto = cyto_r * rng.uniform(*spec.hsil_cytoplasm_scale)
        nc = rng.uniform(*spec.hsil_nc_ratio)
        attrs["nc_ratio"] = nc
        _paint(img, _ellipse_coverage(xs, ys, cx, cy, cyto, cyto * rng.uniform(0.85, 1.0), rng.uniform(0, math.pi)), _CYTOPLASM)
        _draw_nucleus(img, xs, ys, cx, cy, cyto * nc, rng, attrs, _nucleus_color(attrs))
    elif cell_class == AGC:
        attrs["glandular"] = True
        n_nuclei = int(rng.integers(spec.agc_cluster_size[0], spec.agc_cluster_size[1] + 1))
        cyto = cyto_r * rng.uniform(1.0, 1.15)
        _paint(img, _ellipse_coverage(xs, ys, cx, cy, cyto, cyto * rng.uniform(0.85, 1.0), rng.uniform(0, math.pi)), _CYTOPLASM)
        ring_r = cyto * rng.uniform(0.38, 0.5)
        phase = rng.uniform(0, 2 * math.pi)
        color = np.asarray(_NUCLEUS) * rng.uniform(0.7, 0.85)
        for j in range(n_nuclei):
            ang = phase + 2 * math.pi * j / n_nuclei
            nx = cx + ring_r * math.cos(ang)
            ny = cy + ring_r * math.sin(ang)
            r_j = base_r * rng.uniform(1.4, 1.9)
            ecc = rng.uniform(1.0, 1.4)
            cov = _ellipse_coverage(xs, ys, nx, ny, r_j * ecc, r_j / ecc, ang)
            _paint(img, cov, color)

    # Stain domain, then sensor noise.
    dom = spec.domains[domain]
    img = hsv_affine(img, dom.hue_shift, dom.sat_scale, dom.val_offset)
    img = img + rng.normal(0.0, dom.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    multihot = np.asarray(assign_descriptions(cell_class, attrs, vocab), dtype=np.int64)
    return CellImage(pixels=img, label=None, description_labels=multihot, latent_label=cell_class)


def assign_descriptions(cell_class: int, attrs: Dict[str, object], vocab: Optional[Vocabulary] = None) -> List[int]:
    """Multi-hot over the vocabulary for the attributes actually rendered.

    Glandular cells collapse to the single consolidated descriptor and normal
    cells to "normal cell", whatever else was drawn.
    """
    taxonomy.check_class_id(cell_class)
    vocab = vocab or build_vocabulary()
    if cell_class == AGC:
        return vocab.multihot([ATTRIBUTE_DESCRIPTIONS["glandular"]])
    if cell_class == NILM:
        return vocab.multihot([ATTRIBUTE_DESCRIPTIONS["normal"]])
    active = []
    for key, value in attrs.items():
        if not isinstance(value, bool) or not value:
            continue
        if key not in ATTRIBUTE_DESCRIPTIONS:
            raise KeyError(f"rendered attribute {key!r} has no description")
        active.append(ATTRIBUTE_DESCRIPTIONS[key])
    return vocab.multihot(active)


# ---------------------------------------------------------------------------
# Bags and corpus


def generate_wsi_bag(
    slide_class: int,
    config: CorpusConfig,
    rng: np.random.Generator,
    domain: str,
    wsi_id: str = "wsi",
) -> WsiBag:
    """One bag whose max latent cell label equals ``slide_class``."""
    taxonomy.check_class_id(slide_class)
    n = config.cells_per_wsi
    if slide_class > 0 and config.positive_cell_density <= 0:
        raise ValueError("positive slide requested but positive_cell_density <= 0")
    classes = np.zeros(n, dtype=np.int64)
    if slide_class > 0:
        n_primary = max(1, int(round(config.positive_cell_density * n)))
        n_primary = min(n_primary, n)
        classes[:n_primary] = slide_class
        if slide_class > 1 and config.lower_grade_rate > 0:
            lower = rng.random(n - n_primary) < config.lower_grade_rate
            classes[n_primary:][lower] = rng.integers(1, slide_class, size=int(lower.sum()))
        perm = rng.permutation(n)
        classes = classes[perm]
    vocab = build_vocabulary()
    instances = [render_cell(int(c), domain, rng, config.render, vocab) for c in classes]
    return WsiBag(id=wsi_id, instances=instances, label=slide_class, domain=domain, k=min(256, n))


def _quota_classes(n: int, prevalence: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Slide classes via largest-remainder quota, shuffled."""
    exact = np.asarray(prevalence) * n
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    for idx in np.argsort(-remainder):
        if counts.sum() >= n:
            break
        counts[idx] += 1
    classes = np.repeat(np.arange(len(prevalence)), counts)
    rng.shuffle(classes)
    return classes


def generate_corpus(config: CorpusConfig, out_dir: Path | str) -> Manifest:
    """Render the full corpus to ``out_dir`` and return the saved manifest.

    In the train split only the annotation budget's worth of positive cells
    (and a configurable fraction of NILM cells from negative slides) carry
    visible labels and description multi-hots; latent ground truth for every
    cell goes to the oracle sidecar.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary()
    save_vocabulary(vocab, out_dir)

    split_plan = [
        ("train", config.n_train, config.train_domains),
        ("val", config.n_val, config.train_domains),
        ("test", config.n_test, config.train_domains),
        ("shifted-test", config.n_shifted, config.shifted_domains),
    ]
    root_ss = np.random.SeedSequence(config.seed)
    plan_rng = np.random.Generator(np.random.PCG64(root_ss.spawn(1)[0]))
    total = sum(n for _, n, _ in split_plan)
    wsi_seeds = root_ss.spawn(total + 1)
    anno_rng = np.random.Generator(np.random.PCG64(wsi_seeds[-1]))

    records: List[WsiRecord] = []
    latents: Dict[str, dict] = {}
    wsi_counter = 0
    min_positive_cells: Optional[int] = None
    for split, n_wsi, domains in split_plan:
        classes = _quota_classes(n_wsi, config.class_prevalence, plan_rng)
        for j in range(n_wsi):
            wsi_id = f"{split.replace('-', '_')}_{j:04d}"
            domain = str(plan_rng.choice(list(domains)))
            rng = np.random.Generator(np.random.PCG64(wsi_seeds[wsi_counter]))
            wsi_counter += 1
            bag = generate_wsi_bag(int(classes[j]), config, rng, domain, wsi_id)
            cell_entries = []
            cell_latents = []
            cell_desc = []
            for i, cell in enumerate(bag.instances):
                rel = f"tiles/{wsi_id}/{i:04d}.png"
                save_tile(cell.pixels, out_dir / rel)
                cell_entries.append(CellEntry(path=rel, label=None, description_labels=None))
                cell_latents.append(int(cell.latent_label))
                cell_desc.append([int(v) for v in cell.description_labels])
            assert taxonomy.bag_label_from_cells(cell_latents) == bag.label
            n_pos_in_bag = sum(1 for c in cell_latents if c > 0)
            if bag.label > 0:
                min_positive_cells = (
                    n_pos_in_bag if min_positive_cells is None else min(min_positive_cells, n_pos_in_bag)
                )
            records.append(WsiRecord(wsi_id=wsi_id, label=bag.label, domain=domain, split=split, cells=cell_entries))
            latents[wsi_id] = {"labels": cell_latents, "descriptions": cell_desc}

    _annotate_train_split(records, latents, config, anno_rng)

    manifest = Manifest(
        records=records,
        tile_size=config.render.tile_size,
        root=out_dir,
        vocabulary_version=vocab.version,
    )
    save_latents(out_dir, latents)
    n_pos, n_pos_lab, n_neg, n_neg_lab = _train_annotation_counts(records, latents)
    manifest.generator = {
        "seed": config.seed,
        "annotation_budget": config.annotation_budget,
        "negative_annotation_budget": config.negative_annotation_budget,
        "train_positive_cells": n_pos,
        "train_positive_cells_labelled": n_pos_lab,
        "train_positive_labelled_fraction": (n_pos_lab / n_pos) if n_pos else 0.0,
        "train_negative_cells_labelled": n_neg_lab,
        "report_detection_recall": REPORT_DETECTION_RECALL,
        "worst_case_all_positive_miss_rate": (
            taxonomy.all_positive_miss_rate(REPORT_DETECTION_RECALL, min_positive_cells)
            if min_positive_cells
            else None
        ),
    }
    save_manifest(manifest)
    return manifest


def _annotate_train_split(records, latents, config: CorpusConfig, rng: np.random.Generator) -> None:
    """Reveal labels for the budgeted subset of train cells, in place."""
    pos_slots = []  # (record idx, cell idx)
    neg_slots = []
    for ri, rec in enumerate(records):
        if rec.split != "train":
            continue
        lab = latents[rec.wsi_id]["labels"]
        for ci in range(len(rec.cells)):
            if lab[ci] > 0:
                pos_slots.append((ri, ci))
            elif rec.label == 0:
                neg_slots.append((ri, ci))
    n_pos_label = min(len(pos_slots), max(1, int(math.floor(config.annotation_budget * len(pos_slots)))))
    n_neg_label = int(math.floor(config.negative_annotation_budget * len(neg_slots)))
    chosen_pos = rng.choice(len(pos_slots), size=n_pos_label, replace=False) if pos_slots else []
    chosen_neg = rng.choice(len(neg_slots), size=n_neg_label, replace=False) if n_neg_label else []
    for idx in chosen_pos:
        ri, ci = pos_slots[int(idx)]
        rec = records[ri]
        rec.cells[ci].label = latents[rec.wsi_id]["labels"][ci]
        rec.cells[ci].description_labels = list(latents[rec.wsi_id]["descriptions"][ci])
    for idx in chosen_neg:
        ri, ci = neg_slots[int(idx)]
        rec = records[ri]
        rec.cells[ci].label = 0
        rec.cells[ci].description_labels = list(latents[rec.wsi_id]["descriptions"][ci])


def _train_annotation_counts(records, latents):
    n_pos = n_pos_lab = n_neg = n_neg_lab = 0
    for rec in records:
        if rec.split != "train":
            continue
        lab = latents[rec.wsi_id]["labels"]
        for ci, cell in enumerate(rec.cells):
            if lab[ci] > 0:
                n_pos += 1
                n_pos_lab += cell.label is not None
            else:
                n_neg += 1
                n_neg_lab += cell.label is not None
    return n_pos, n_pos_lab, n_neg, n_neg_lab
