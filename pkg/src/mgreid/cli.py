"""Command-line interface: synth, train, eval, extract, rollout."""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np
from PIL import Image

from .configio import load_run_config, write_run_config, RunConfig
from .association import AssociationConfig
from .backbone import BackboneConfig
from .data import (DatasetManifest, DiskImageSource, SyntheticSpec,
                   generate_synthetic, load_manifest, write_synthetic)
from .errors import MgreidError, ValidationError
from .evalkit import attention_rollout, evaluate
from .heads import HeadConfig
from .memory import LossWeights, MemoryConfig
from .model import load_checkpoint
from .trainer import TrainConfig, extract_features, train

_FUSION_ALIASES = {"avg": "avg", "b1": "branch1", "b2": "branch2",
                   "branch1": "branch1", "branch2": "branch2"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgreid")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--ids", type=int, default=16)
    p.add_argument("--cams", type=int, default=4)
    p.add_argument("--imgs", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--cam-shift", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run the unsupervised training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p.add_argument("--fusion", choices=sorted(_FUSION_ALIASES))
    p.add_argument("--no-duplicate", action="store_true")
    p.add_argument("--lambda-p", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--use-gt", action="store_true",
                   help="supervised upper-bound: true ids replace pseudo labels")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--per-query", help="write per-query AP rows to this CSV")
    p.add_argument("--max-rank", type=int, default=10)

    p = sub.add_parser("extract", help="export inference features to disk")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output prefix (.npy/.csv added)")
    p.add_argument("--split", choices=["all", "train", "query", "gallery"], default="all")

    p = sub.add_parser("rollout", help="attention-rollout heat map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output prefix (.png/.txt added)")
    p.add_argument("--camera", type=int, default=0)
    return parser


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(num_ids=args.ids, num_cameras=args.cams,
                         images_per_id_per_camera=args.imgs,
                         image_height=args.height, image_width=args.width,
                         noise_sigma=args.noise, camera_shift=args.cam_shift,
                         seed=args.seed)
    dataset = generate_synthetic(spec)
    manifest_path = write_synthetic(dataset, args.out)
    # The starter config carries the recipe tuned for this desk-scale data, not
    # the full-size defaults: soft camera term, clustering radius pinned below
    # the per-(id, camera) block radius, a short schedule, gentle augmentation.
    cfg = RunConfig(
        backbone=BackboneConfig(image_height=args.height, image_width=args.width,
                                num_cameras=args.cams, camera_weight=1.0),
        head=HeadConfig(),
        association=AssociationConfig(dbscan_eps=0.005, dbscan_min_samples=3,
                                      num_hard_negatives=8, online_topk=5),
        memory=MemoryConfig(),
        weights=LossWeights(),
        train=TrainConfig(epochs=15, base_lr=2e-3, warmup_epochs=3,
                          step_epochs=(), batch_size=32, seed=args.seed,
                          flip_p=0.5, crop_pad=3, erase_p=0.0),
        manifest=manifest_path, out_dir=os.path.join(args.out, "run"),
    )
    config_path = os.path.join(args.out, "config.ini")
    write_run_config(cfg, config_path)
    counts = {s: len(dataset.manifest.split(s)) for s in ("train", "query", "gallery")}
    print(f"wrote {len(dataset.manifest)} images under {args.out} "
          f"(train {counts['train']}, query {counts['query']}, gallery {counts['gallery']})")
    print(f"manifest: {manifest_path}")
    print(f"starter config: {config_path}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    head = cfg.head
    k1, k2 = head.partitions
    if args.k1 is not None:
        k1 = args.k1
    if args.k2 is not None:
        k2 = args.k2
    fusion = _FUSION_ALIASES[args.fusion] if args.fusion else head.fusion_mode
    duplicate = False if args.no_duplicate else head.duplicate_last_layer
    cfg.head = HeadConfig(partitions=(k1, k2), duplicate_last_layer=duplicate,
                          fusion_mode=fusion)
    if args.lambda_p is not None:
        cfg.weights = LossWeights(args.lambda_p)
    if args.eps is not None:
        cfg.association = AssociationConfig(
            dbscan_eps=args.eps,
            dbscan_min_samples=cfg.association.dbscan_min_samples,
            num_hard_negatives=cfg.association.num_hard_negatives,
            online_topk=cfg.association.online_topk)
    train_kv = cfg.train.__dict__ | {}
    if args.epochs is not None:
        train_kv["epochs"] = args.epochs
    if args.seed is not None:
        train_kv["seed"] = args.seed
    cfg.train = TrainConfig(**train_kv)
    manifest_path = args.manifest or cfg.manifest
    if manifest_path is None:
        raise ValidationError("no manifest: set [data] manifest or pass --manifest")
    out_dir = args.out or cfg.out_dir
    if out_dir is None:
        raise ValidationError("no output directory: set [data] out_dir or pass --out")
    manifest = load_manifest(manifest_path, num_cameras=cfg.backbone.num_cameras)
    source = DiskImageSource(os.path.dirname(os.path.abspath(manifest_path)))
    result = train(manifest, source, backbone_cfg=cfg.backbone, head_cfg=cfg.head,
                   assoc_cfg=cfg.association, memory_cfg=cfg.memory,
                   weights=cfg.weights, train_cfg=cfg.train, out_dir=out_dir,
                   use_ground_truth=args.use_gt, verbose=not args.quiet)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"loss log: {os.path.join(out_dir, 'loss_log.csv')}")
    return 0


def _load_split_features(model, manifest: DatasetManifest, source, split: str):
    records = manifest.split(split)
    if not records:
        raise ValidationError(f"manifest has no {split} rows")
    images = np.stack([np.asarray(source.get(r.path), dtype=np.float64) / 255.0
                       for r in records])
    cams = np.array([r.camera_id for r in records], dtype=int)
    feats = extract_features(model, images, cams)
    return records, feats.global_features, cams


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, num_cameras=model.backbone_cfg.num_cameras)
    source = DiskImageSource(os.path.dirname(os.path.abspath(args.manifest)))
    q_recs, q_feats, q_cams = _load_split_features(model, manifest, source, "query")
    g_recs, g_feats, g_cams = _load_split_features(model, manifest, source, "gallery")
    q_ids = np.array([r.person_id for r in q_recs], dtype=int)
    g_ids = np.array([r.person_id for r in g_recs], dtype=int)
    result = evaluate(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams,
                      max_rank=max(args.max_rank, 10))
    print(f"{'metric':<10}{'value':>8}")
    print(f"{'mAP':<10}{result.mean_ap:>8.4f}")
    for k in (1, 5, 10):
        print(f"{'Rank-' + str(k):<10}{result.cmc[k - 1]:>8.4f}")
    print(f"{'queries':<10}{result.valid_query_count:>4d}/{len(q_recs):<4d}")
    if args.per_query:
        with open(args.per_query, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "person_id", "camera_id", "valid", "ap"])
            for i, rec in enumerate(q_recs):
                ap = "" if not result.valid[i] else repr(float(result.per_query_ap[i]))
                writer.writerow([rec.path, rec.person_id, rec.camera_id,
                                 int(result.valid[i]), ap])
        print(f"per-query AP written to {args.per_query}")
    return 0


def _cmd_extract(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, num_cameras=model.backbone_cfg.num_cameras)
    source = DiskImageSource(os.path.dirname(os.path.abspath(args.manifest)))
    records = manifest.records if args.split == "all" else manifest.split(args.split)
    if not records:
        raise ValidationError(f"manifest has no {args.split} rows")
    images = np.stack([np.asarray(source.get(r.path), dtype=np.float64) / 255.0
                       for r in records])
    cams = np.array([r.camera_id for r in records], dtype=int)
    feats = extract_features(model, images, cams)
    np.save(args.out + ".npy", feats.global_features)
    with open(args.out + ".csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "camera_id"])
        for rec in records:
            writer.writerow([rec.path, rec.camera_id])
    print(f"wrote {len(records)} features to {args.out}.npy (+ sidecar {args.out}.csv)")
    return 0


def _cmd_rollout(args) -> int:
    model = load_checkpoint(args.checkpoint)
    with Image.open(args.image) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    model.forward(pixels[None], np.array([args.camera]), train=False)
    cfg = model.backbone_cfg
    result = attention_rollout(model.rollout_attentions(), cfg.grid_rows, cfg.grid_cols)
    if result.degenerate:
        print("warning: degenerate (constant) rollout map", file=sys.stderr)
    heat8 = np.clip(np.rint(result.heat * 255), 0, 255).astype(np.uint8)
    upscaled = np.kron(heat8, np.ones((cfg.patch_size, cfg.patch_size), dtype=np.uint8))
    Image.fromarray(upscaled, mode="L").save(args.out + ".png")
    np.savetxt(args.out + ".txt", result.raw)
    print(f"wrote heat map {args.out}.png and raw matrix {args.out}.txt")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "extract": _cmd_extract,
    "rollout": _cmd_rollout,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except MgreidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
