"""Alternating training pipeline: per epoch, extract inference features,
cluster them, split camera-aware proxies, rebuild memories, then run
proxy-balanced batches under the total contrastive loss with SGD.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .association import (OUTLIER, AssociationConfig, ProxyLabeling, batch_sets,
                          cluster, split_camera_proxies, write_labeling)
from .backbone import BackboneConfig
from .data import DatasetManifest
from .errors import ConfigurationError, InputError, LabelingError, ValidationError
from .heads import HeadConfig
from .memory import (GLOBAL_HEAD, LossWeights, MemoryConfig, ProxyMemory,
                     TotalLossResult, total_loss)
from .model import MultiGrainFeatures, MultiGrainModel, save_checkpoint
from .nn import SGD

Array = np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 50
    base_lr: float = 3.5e-4
    weight_decay: float = 5e-4
    momentum: float = 0.9
    warmup_epochs: int = 10
    warmup_start_factor: float = 0.01
    step_epochs: tuple[int, ...] = (20, 40)
    step_factor: float = 0.1
    batch_size: int = 32
    seed: int = 0
    flip_p: float = 0.5
    crop_pad: int = 10
    erase_p: float = 0.5

    def __post_init__(self) -> None:
        self.step_epochs = tuple(int(s) for s in self.step_epochs)
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("base_lr must be > 0 and weight_decay >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("SGD momentum must lie in [0, 1)")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must lie in [0, epochs)")
        if not 0.0 < self.warmup_start_factor <= 1.0:
            raise ConfigurationError("warmup_start_factor must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.step_epochs, self.step_epochs[1:])):
            raise ConfigurationError("step_epochs must be strictly increasing")
        if any(not 0 <= s < self.epochs for s in self.step_epochs):
            raise ConfigurationError("step_epochs must lie in [0, epochs)")
        if not 0.0 < self.step_factor <= 1.0:
            raise ConfigurationError("step_factor must lie in (0, 1]")
        if self.batch_size < 4 or self.batch_size % 4:
            raise ConfigurationError("batch_size must be a positive multiple of 4")
        if not 0.0 <= self.flip_p <= 1.0 or not 0.0 <= self.erase_p <= 1.0:
            raise ConfigurationError("flip_p and erase_p must lie in [0, 1]")
        if self.crop_pad < 0:
            raise ConfigurationError("crop_pad must be >= 0")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Warmup from base_lr*warmup_start_factor at epoch 0 linearly to base_lr
    at epoch warmup_epochs, then multiply by step_factor at each step epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise InputError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        frac = cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * epoch / cfg.warmup_epochs
        return cfg.base_lr * frac
    decays = sum(1 for s in cfg.step_epochs if epoch >= s)
    return cfg.base_lr * cfg.step_factor ** decays


class Augmenter:
    """Seeded training-time augmentation: horizontal flip, zero-pad + random
    crop back to size, random erasing (2-40% area, aspect 0.3-3.3, filled with
    the per-channel dataset mean). Pad size and probabilities are tunable; the
    defaults suit person-crop resolutions around 256x128, while small toy
    images want a smaller pad and gentler (or no) erasing."""

    PAD = 10

    def __init__(self, rng: np.random.Generator, fill: Array,
                 flip_p: float = 0.5, erase_p: float = 0.5, pad: int | None = None):
        self.rng = rng
        self.fill = np.asarray(fill, dtype=np.float64)
        self.flip_p = flip_p
        self.erase_p = erase_p
        self.pad = self.PAD if pad is None else int(pad)

    def __call__(self, image: Array) -> Array:
        h, w = image.shape[:2]
        out = image
        if self.rng.random() < self.flip_p:
            out = out[:, ::-1]
        if self.pad > 0:
            padded = np.zeros((h + 2 * self.pad, w + 2 * self.pad, 3))
            padded[self.pad : self.pad + h, self.pad : self.pad + w] = out
            top = int(self.rng.integers(0, 2 * self.pad + 1))
            left = int(self.rng.integers(0, 2 * self.pad + 1))
            out = padded[top : top + h, left : left + w].copy()
        else:
            out = out.copy()
        if self.rng.random() < self.erase_p:
            self._erase(out)
        return out

    def _erase(self, image: Array) -> None:
        h, w = image.shape[:2]
        for _ in range(10):
            area = self.rng.uniform(0.02, 0.4) * h * w
            aspect = math.exp(self.rng.uniform(math.log(0.3), math.log(3.3)))
            eh = int(round(math.sqrt(area * aspect)))
            ew = int(round(math.sqrt(area / aspect)))
            if 0 < eh <= h and 0 < ew <= w:
                top = int(self.rng.integers(0, h - eh + 1))
                left = int(self.rng.integers(0, w - ew + 1))
                image[top : top + eh, left : left + ew] = self.fill
                return


def extract_features(model: MultiGrainModel, images: Array, camera_ids: Array,
                     batch_size: int = 64) -> MultiGrainFeatures:
    """Inference-mode features for a stack of images (no augmentation)."""
    globals_, parts = [], []
    for start in range(0, len(images), batch_size):
        feats = model.forward(images[start : start + batch_size],
                              camera_ids[start : start + batch_size], train=False)
        globals_.append(feats.global_features)
        parts.append(feats.part_features)
    return MultiGrainFeatures(np.concatenate(globals_), np.concatenate(parts))


class ProxyBalancedSampler:
    """Yields batches of B/4 proxies x 4 instances over non-outlier images."""

    def __init__(self, pseudo_labels: Array, batch_size: int, rng: np.random.Generator):
        self.rng = rng
        self.batch_size = batch_size
        self.members: dict[int, Array] = {}
        for p in np.unique(pseudo_labels):
            if p == OUTLIER:
                continue
            self.members[int(p)] = np.flatnonzero(pseudo_labels == p)
        self.num_images = int(sum(len(m) for m in self.members.values()))
        if not self.members:
            raise LabelingError("sampler needs at least one non-outlier proxy")

    def batches(self):
        proxies = np.array(sorted(self.members), dtype=int)
        per_batch = self.batch_size // 4
        n_iters = max(1, math.ceil(self.num_images / self.batch_size))
        for _ in range(n_iters):
            chosen = self.rng.choice(proxies, size=per_batch,
                                     replace=len(proxies) < per_batch)
            batch = []
            for p in chosen:
                pool = self.members[int(p)]
                batch.extend(self.rng.choice(pool, size=4, replace=len(pool) < 4))
            yield np.array(batch, dtype=int)


@dataclass
class EpochReport:
    epoch: int
    lr: float
    num_clusters: int
    num_proxies: int
    num_outliers: int
    steps: int
    mean_global_offline: float
    mean_global_online: float
    mean_parts: float
    mean_total: float


@dataclass
class TrainResult:
    model: MultiGrainModel
    reports: list[EpochReport]
    history: list[tuple]  # (epoch, step, off, on, parts, total)
    final_checkpoint: str | None = None


LOG_HEADER = "epoch,step,global_offline,global_online,parts,total"


def _prepare_images(records, source) -> Array:
    return np.stack([np.asarray(source.get(r.path), dtype=np.float64) / 255.0
                     for r in records])


def epoch_cycle(model: MultiGrainModel, optimizer: SGD, images: Array,
                camera_ids: Array, epoch: int, lr: float,
                assoc_cfg: AssociationConfig, memory_cfg: MemoryConfig,
                weights: LossWeights, batch_size: int, rng: np.random.Generator,
                augmenter: Augmenter, history: list,
                fixed_clusters: Array | None = None,
                labeling_path: str | None = None) -> EpochReport:
    """One full alternation: extract -> cluster -> proxies -> memories -> batches.

    fixed_clusters substitutes ground-truth ids for the pseudo clusters (the
    optional supervised upper-bound mode); everything downstream is unchanged.
    """
    feats = extract_features(model, images, camera_ids)
    if fixed_clusters is None:
        clusters = cluster(feats.global_features, assoc_cfg)
    else:
        clusters = np.asarray(fixed_clusters, dtype=int)
    labeling = split_camera_proxies(clusters, camera_ids)
    if labeling_path is not None:
        ids = [str(i) for i in range(len(images))]
        write_labeling(labeling_path, ids, clusters, labeling, camera_ids)

    num_parts = feats.num_parts
    global_memory = ProxyMemory.from_features(
        feats.global_features, labeling.pseudo_label, labeling.num_proxies,
        memory_cfg, GLOBAL_HEAD)
    part_memories = [
        ProxyMemory.from_features(feats.part_features[:, k], labeling.pseudo_label,
                                  labeling.num_proxies, memory_cfg, k + 1)
        for k in range(num_parts)
    ]

    sampler = ProxyBalancedSampler(labeling.pseudo_label, batch_size, rng)
    sums = np.zeros(4)
    steps = 0
    for step, batch_idx in enumerate(sampler.batches()):
        batch_images = np.stack([augmenter(images[i]) for i in batch_idx])
        batch_cams = camera_ids[batch_idx]
        batch_labels = labeling.pseudo_label[batch_idx]
        feats_b = model.forward(batch_images, batch_cams, train=True)
        sets = batch_sets(feats_b.global_features, batch_labels, batch_cams,
                          labeling, global_memory.bank, assoc_cfg)
        result: TotalLossResult = total_loss(
            feats_b.global_features, feats_b.part_features, sets,
            global_memory, part_memories, weights)
        model.zero_grads()
        model.backward(result.d_global, result.d_parts)
        optimizer.step(model, lr)
        for j, label in enumerate(batch_labels):
            global_memory.update(int(label), feats_b.global_features[j])
            for k in range(num_parts):
                part_memories[k].update(int(label), feats_b.part_features[j, k])
        row = (epoch, step, result.global_offline, result.global_online,
               result.parts_weighted, result.value)
        history.append(row)
        sums += (result.global_offline, result.global_online,
                 result.parts_weighted, result.value)
        steps += 1

    return EpochReport(
        epoch=epoch, lr=lr,
        num_clusters=labeling.num_clusters,
        num_proxies=labeling.num_proxies,
        num_outliers=int((clusters == OUTLIER).sum()),
        steps=steps,
        mean_global_offline=sums[0] / steps,
        mean_global_online=sums[1] / steps,
        mean_parts=sums[2] / steps,
        mean_total=sums[3] / steps,
    )


def train(manifest: DatasetManifest, source, *, backbone_cfg: BackboneConfig,
          head_cfg: HeadConfig, assoc_cfg: AssociationConfig,
          memory_cfg: MemoryConfig, weights: LossWeights, train_cfg: TrainConfig,
          out_dir: str | None = None, checkpoint_every: int = 1,
          use_ground_truth: bool = False, verbose: bool = False,
          model: MultiGrainModel | None = None) -> TrainResult:
    """Run the full training loop on the manifest's train split.

    Unsupervised by default: person ids on train rows are never read unless
    use_ground_truth is set (the supervised upper-bound sanity mode).
    """
    records = manifest.split("train")
    if not records:
        raise ValidationError("manifest has no train rows")
    for r in records:
        if not 0 <= r.camera_id < backbone_cfg.num_cameras:
            raise ValidationError(
                f"train row {r.path}: camera {r.camera_id} outside "
                f"[0, {backbone_cfg.num_cameras})")
    images = _prepare_images(records, source)
    if images.shape[1:] != (backbone_cfg.image_height, backbone_cfg.image_width, 3):
        raise ValidationError(
            f"train images are {images.shape[1:]}, config wants "
            f"({backbone_cfg.image_height}, {backbone_cfg.image_width}, 3)")
    camera_ids = np.array([r.camera_id for r in records], dtype=int)

    fixed_clusters = None
    if use_ground_truth:
        gt = [r.person_id for r in records]
        if any(pid is None or pid < 0 for pid in gt):
            raise ValidationError("ground-truth mode requires person_id on train rows")
        _, fixed_clusters = np.unique(np.array(gt, dtype=int), return_inverse=True)

    if model is None:
        model = MultiGrainModel(backbone_cfg, head_cfg, seed=train_cfg.seed)
    optimizer = SGD(train_cfg.momentum, train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    augmenter = Augmenter(rng, fill=images.mean(axis=(0, 1, 2)),
                          flip_p=train_cfg.flip_p, erase_p=train_cfg.erase_p,
                          pad=train_cfg.crop_pad)

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "loss_log.csv"), "w", encoding="utf-8")
        log_fh.write(LOG_HEADER + "\n")

    reports: list[EpochReport] = []
    history: list[tuple] = []
    final_path = None
    try:
        for epoch in range(train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            labeling_path = (os.path.join(out_dir, f"labeling_epoch{epoch:03d}.txt")
                             if out_dir is not None else None)
            start = len(history)
            try:
                report = epoch_cycle(
                    model, optimizer, images, camera_ids, epoch, lr, assoc_cfg,
                    memory_cfg, weights, train_cfg.batch_size, rng, augmenter,
                    history, fixed_clusters=fixed_clusters,
                    labeling_path=labeling_path)
            except LabelingError as exc:
                raise LabelingError(f"epoch {epoch} aborted: {exc}") from exc
            if log_fh is not None:
                for row in history[start:]:
                    log_fh.write(",".join(repr(v) for v in row) + "\n")
                log_fh.flush()
            reports.append(report)
            if verbose:
                print(f"epoch {epoch:3d}  lr {lr:.2e}  clusters {report.num_clusters:3d}  "
                      f"proxies {report.num_proxies:3d}  outliers {report.num_outliers:3d}  "
                      f"loss {report.mean_total:.4f}")
            if out_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(model, os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.npz"))
        if out_dir is not None:
            final_path = os.path.join(out_dir, "checkpoint_final.npz")
            save_checkpoint(model, final_path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, reports, history, final_path)
