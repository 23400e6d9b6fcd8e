"""Command-line orchestration: synth | pretrain-cell | train-swift |
train-align | eval | explain.

Every command is idempotent given an identical config and seed and writes a
resolved config snapshot into its output directory. Exit codes: 0 ok, 1 user
error (bad arguments, missing prerequisites), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .alignment import (
    build_vocabulary,
    describe,
    encode_descriptions,
    train_text_alignment,
)
from .bags import topk_select
from .config import ConfigError, RunConfig, load_config, parse_override, write_snapshot
from .evaluation import evaluate, infer_bag, roc_points, write_report
from .manifest import ManifestError, TileStore, load_manifest
from .models import ModelBundle, load_checkpoint, save_checkpoint, state_digest
from .synthgen import generate_corpus
from .taxonomy import CLASS_NAMES
from .training import (
    JsonlLogger,
    TrainData,
    coloradv_finetune_phase,
    interleaved_phase,
    pretrain_cell_classifier,
    set_determinism,
    train_swift_phase,
)

OUTPUT_ROOT_ENV = "CYTOMIL_OUT"


class UserError(Exception):
    """Invalid invocation or missing prerequisite; exits with code 1."""


def _default_out(command: str, out: Optional[str]) -> Path:
    if out:
        return Path(out)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / command


def _load_corpus(corpus_dir: Path | str):
    try:
        return load_manifest(corpus_dir)
    except ManifestError as e:
        raise UserError(f"{e}\nGenerate the corpus first: cytomil synth --out {corpus_dir}") from e


def _load_bundle(checkpoint: Path | str, needed_by: str):
    try:
        return load_checkpoint(checkpoint)
    except FileNotFoundError as e:
        raise UserError(f"{e}\nProduce a checkpoint first: cytomil {needed_by}") from e


def cmd_synth(cfg: RunConfig, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    manifest = generate_corpus(cfg.synth, out_dir)
    write_snapshot(cfg, out_dir, "synth", {"n_wsi": len(manifest.records)})
    return out_dir


def cmd_pretrain_cell(cfg: RunConfig, corpus_dir: Path | str, out_dir: Path | str) -> Path:
    manifest = _load_corpus(corpus_dir)
    out_dir = Path(out_dir)
    set_determinism(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    data = TrainData.from_manifest(manifest)
    if not data.labelled_paths:
        raise UserError("train split has no labelled cells; regenerate the corpus with a positive annotation budget")
    log = JsonlLogger(out_dir / "pretrain_log.jsonl")
    bundle = pretrain_cell_classifier(data, cfg.model, cfg.swift, rng, log)
    ckpt = save_checkpoint(bundle, out_dir / "checkpoint.pt", {"phase": "pretrain-cell", "seed": cfg.seed})
    write_snapshot(cfg, out_dir, "pretrain-cell", {"checkpoint": str(ckpt)})
    return ckpt


def cmd_train_swift(
    cfg: RunConfig,
    corpus_dir: Path | str,
    out_dir: Path | str,
    init_checkpoint: Optional[Path | str] = None,
    coloradv: bool = False,
) -> Path:
    manifest = _load_corpus(corpus_dir)
    out_dir = Path(out_dir)
    set_determinism(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    data = TrainData.from_manifest(manifest)

    if cfg.swift.warm_start:
        if init_checkpoint is None:
            raise UserError(
                "warm start requires an initial checkpoint; run cytomil pretrain-cell "
                "first or pass --cold-start"
            )
        bundle, _ = _load_bundle(init_checkpoint, "pretrain-cell")
    else:
        bundle = ModelBundle.create(cfg.model)

    phase = "train-swift"
    log = JsonlLogger(out_dir / "train_log.jsonl")
    if coloradv and cfg.coloradv.interleave:
        adv_log = JsonlLogger(out_dir / "coloradv_log.jsonl")
        bundle = interleaved_phase(bundle, data, cfg.swift, cfg.coloradv, rng, log, adv_log)
        phase = "train-swift+coloradv-interleaved"
    else:
        bundle = train_swift_phase(bundle, data, cfg.swift, rng, log)
        if coloradv:
            adv_log = JsonlLogger(out_dir / "coloradv_log.jsonl")
            bundle = coloradv_finetune_phase(bundle, data, cfg.swift, cfg.coloradv, rng, adv_log)
            phase = "train-swift+coloradv"
    ckpt = save_checkpoint(bundle, out_dir / "checkpoint.pt", {"phase": phase, "seed": cfg.seed})
    write_snapshot(cfg, out_dir, phase, {"checkpoint": str(ckpt)})
    return ckpt


def cmd_train_align(
    cfg: RunConfig, corpus_dir: Path | str, checkpoint: Path | str, out_dir: Path | str
) -> Path:
    manifest = _load_corpus(corpus_dir)
    out_dir = Path(out_dir)
    bundle, _ = _load_bundle(checkpoint, "train-swift")
    set_determinism(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)

    vocab = build_vocabulary()
    store = TileStore(manifest.root)
    pixels, targets = [], []
    for rec in manifest.split("train"):
        for cell in rec.cells:
            if cell.description_labels is not None:
                pixels.append(store.get(cell.path))
                targets.append(cell.description_labels)
    if not pixels:
        raise UserError("no description-labelled cells in the train split; regenerate with a larger annotation budget")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape[1] != len(vocab):
        raise UserError(f"corpus description vectors have {targets.shape[1]} entries, vocabulary has {len(vocab)}")

    bundle.eval()
    encoder_digest = state_digest(bundle.student)
    with torch.no_grad():
        feats = torch.cat(
            [
                bundle.student(torch.from_numpy(np.stack(pixels[i : i + 256])).permute(0, 3, 1, 2).float())
                for i in range(0, len(pixels), 256)
            ]
        )
    text_encoder, history = train_text_alignment(feats, targets, cfg.align, rng, vocab)
    assert state_digest(bundle.student) == encoder_digest, "image encoder changed during alignment"
    bundle.text_encoder = text_encoder
    ckpt = save_checkpoint(bundle, out_dir / "checkpoint.pt", {"phase": "train-align", "seed": cfg.seed})
    (out_dir / "align_history.json").write_text(json.dumps(history, indent=1))
    write_snapshot(cfg, out_dir, "train-align", {"checkpoint": str(ckpt)})
    return ckpt


def cmd_eval(
    cfg: RunConfig, corpus_dir: Path | str, checkpoint: Path | str, split: str, out_dir: Path | str
) -> Path:
    manifest = _load_corpus(corpus_dir)
    out_dir = Path(out_dir)
    bundle, _ = _load_bundle(checkpoint, "train-swift")
    set_determinism(cfg.seed, cfg.deterministic)
    report = evaluate(
        bundle,
        manifest,
        split,
        k=cfg.eval_k(),
        sensitivity_target=cfg.eval.sensitivity_target,
        include_absent_classes=cfg.eval.include_absent_classes,
    )
    path = write_report(report, out_dir)
    write_snapshot(cfg, out_dir, "eval", {"split": split, "metrics": str(path)})
    return path


def cmd_explain(
    cfg: RunConfig,
    corpus_dir: Path | str,
    checkpoint: Path | str,
    wsi_id: str,
    topk: int,
    out_dir: Path | str,
) -> Path:
    manifest = _load_corpus(corpus_dir)
    out_dir = Path(out_dir)
    bundle, _ = _load_bundle(checkpoint, "train-swift")
    if bundle.text_encoder is None:
        raise UserError("checkpoint has no text encoder; run cytomil train-align first")
    try:
        rec = manifest.record(wsi_id)
    except KeyError as e:
        raise UserError(str(e)) from e
    if topk < 1:
        raise UserError(f"--topk must be positive, got {topk}")

    bundle.eval()
    store = TileStore(manifest.root)
    images = [store.get(c.path) for c in rec.cells]
    wsi_probs, binary, _, _, scores, _ = infer_bag(bundle, images, cfg.eval_k())
    vocab = build_vocabulary()
    with torch.no_grad():
        t_feats = encode_descriptions(vocab, bundle.text_encoder)
        roi = []
        for idx in topk_select(scores, topk):
            x = torch.from_numpy(images[int(idx)]).unsqueeze(0).permute(0, 3, 1, 2).float()
            z = bundle.student(x)
            probs = torch.softmax(bundle.cell_head(z), dim=-1).squeeze(0).numpy()
            picked = describe(z.squeeze(0), t_feats, cfg.align.lambda_select, vocab)
            roi.append(
                {
                    "cell_id": f"{wsi_id}/{int(idx)}",
                    "path": rec.cells[int(idx)].path,
                    "positive_score": float(scores[int(idx)]),
                    "predicted_class": CLASS_NAMES[int(probs.argmax())],
                    "class_probs": [float(p) for p in probs],
                    "descriptions": [d for d, _ in picked],
                    "sims": [s for _, s in picked],
                }
            )
    payload = {
        "wsi_id": wsi_id,
        "wsi_predicted_class": CLASS_NAMES[int(wsi_probs.argmax())],
        "wsi_binary_score": binary,
        "cells": roi,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"explain_{wsi_id}.json"
    path.write_text(json.dumps(payload, indent=1))
    write_snapshot(cfg, out_dir, "explain", {"wsi_id": wsi_id})
    return path


# ---------------------------------------------------------------------------
# argparse plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cytomil", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cytomil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default=None, help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    common(p)

    p = sub.add_parser("pretrain-cell", help="supervised warm start on annotated cells")
    common(p)
    p.add_argument("--corpus", type=str, required=True)

    p = sub.add_parser("train-swift", help="semi-weak end-to-end training")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--init-checkpoint", type=str, default=None, help="warm-start checkpoint")
    p.add_argument("--cold-start", action="store_true", help="skip the warm start (ablation)")
    p.add_argument("--coloradv", action="store_true", help="add the color-adversarial fine-tune phase")

    p = sub.add_parser("train-align", help="train the description text encoder")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--split", type=str, default="test")

    p = sub.add_parser("explain", help="top-scoring cells of one slide with descriptions")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--wsi-id", type=str, required=True)
    p.add_argument("--topk", type=int, default=None)

    return parser


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, value = parse_override(item)
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        out = _default_out(args.command, args.out)
        if args.command == "synth":
            path = cmd_synth(cfg, out)
        elif args.command == "pretrain-cell":
            path = cmd_pretrain_cell(cfg, args.corpus, out)
        elif args.command == "train-swift":
            if args.cold_start:
                from dataclasses import replace

                cfg = replace(cfg, swift=replace(cfg.swift, warm_start=False))
            path = cmd_train_swift(cfg, args.corpus, out, args.init_checkpoint, coloradv=args.coloradv)
        elif args.command == "train-align":
            path = cmd_train_align(cfg, args.corpus, args.checkpoint, out)
        elif args.command == "eval":
            path = cmd_eval(cfg, args.corpus, args.checkpoint, args.split, out)
        elif args.command == "explain":
            topk = args.topk if args.topk is not None else cfg.eval.explain_topk
            path = cmd_explain(cfg, args.corpus, args.checkpoint, args.wsi_id, topk, out)
        else:  # pragma: no cover
            raise UserError(f"unknown command {args.command!r}")
        print(path)
        return 0
    except (UserError, ConfigError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
