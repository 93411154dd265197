"""Assembled extractor: backbone trunk, duplicated final layer, multi-grain
heads, joint backward pass, and checkpoint I/O.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .backbone import Backbone, BackboneConfig, TokenSequence
from .errors import CheckpointError, ConfigurationError, InputError
from .heads import (FeatureHead, HeadConfig, fuse_global, fuse_global_backward,
                    pool_parts, pool_parts_backward)

Array = np.ndarray

CHECKPOINT_FORMAT = "mgreid-checkpoint-1"


@dataclass
class MultiGrainFeatures:
    """One batch of normalized features: a global vector and K part vectors per
    image. Rows are unit-norm; parts follow branch-1 stripes then branch-2."""

    global_features: Array  # [B, D]
    part_features: Array  # [B, K, D]

    @property
    def num_parts(self) -> int:
        return self.part_features.shape[1]


def _clone_layer(src: nn.TransformerLayer, dim: int, num_heads: int) -> nn.TransformerLayer:
    dst = nn.TransformerLayer(np.random.default_rng(0), dim, num_heads)
    for (_, pd), (_, ps) in zip(dst.named_params(), src.named_params()):
        pd[...] = ps
    return dst


class MultiGrainModel(nn.Module):
    """Backbone plus dual-branch multi-grain feature heads.

    The final transformer layer is duplicated into two branches with identical
    initialization (branch 1 *is* the backbone's last layer). With
    duplicate_last_layer=False both branches alias the single last layer's
    output. Branch 1 is pooled into partitions[0] stripes, branch 2 into
    partitions[1]; the global feature fuses the two cls tokens.
    """

    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: HeadConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.backbone_cfg = backbone_cfg
        self.head_cfg = head_cfg
        for k in head_cfg.partitions:
            if k > backbone_cfg.grid_rows:
                raise ConfigurationError(
                    f"{k} stripes exceed the {backbone_cfg.grid_rows}-row token grid")
        self.backbone = self.add_child("backbone", Backbone(backbone_cfg, rng))
        if head_cfg.duplicate_last_layer:
            self.branch2 = self.add_child(
                "branch2",
                _clone_layer(self.backbone.layers[-1], backbone_cfg.embed_dim,
                             backbone_cfg.num_heads))
        else:
            self.branch2 = None
        dim = backbone_cfg.embed_dim
        self.heads = [
            self.add_child(f"heads.{i}", FeatureHead(dim))
            for i in range(1 + head_cfg.num_parts)
        ]

    # -- forward / backward --------------------------------------------------

    @property
    def branch1(self) -> nn.TransformerLayer:
        return self.backbone.layers[-1]

    def dual_branch_forward(self, trunk_out: TokenSequence) -> tuple[TokenSequence, TokenSequence]:
        """Run the duplicated final layer(s) on the penultimate tokens."""
        out1 = TokenSequence(self.branch1.forward(trunk_out.tokens),
                             trunk_out.grid_rows, trunk_out.grid_cols)
        if self.branch2 is None:
            return out1, out1
        out2 = TokenSequence(self.branch2.forward(trunk_out.tokens),
                             trunk_out.grid_rows, trunk_out.grid_cols)
        return out1, out2

    def forward(self, images: Array, camera_ids, train: bool = False) -> MultiGrainFeatures:
        k1, k2 = self.head_cfg.partitions
        seq = self.backbone.tokenize(images, camera_ids, train)
        trunk_out = self.backbone.forward_layers(seq, self.backbone_cfg.num_layers - 1)
        b1, b2 = self.dual_branch_forward(trunk_out)
        parts_pre = np.concatenate([pool_parts(b1, k1), pool_parts(b2, k2)], axis=1)
        global_pre = fuse_global(b1.cls, b2.cls, self.head_cfg.fusion_mode)
        g = self.heads[0].forward(global_pre, train)
        parts = np.stack(
            [self.heads[1 + k].forward(parts_pre[:, k], train)
             for k in range(parts_pre.shape[1])], axis=1)
        self._grid = (b1.grid_rows, b1.grid_cols)
        return MultiGrainFeatures(g, parts)

    def backward(self, d_global: Array, d_parts: Array) -> None:
        """Backpropagate loss gradients on the normalized features into all
        parameter gradients (accumulating; call zero_grads first)."""
        k1, k2 = self.head_cfg.partitions
        rows, cols = self._grid
        b, _, d = d_parts.shape
        t = rows * cols + 1

        d_parts_pre = np.stack(
            [self.heads[1 + k].backward(d_parts[:, k]) for k in range(k1 + k2)], axis=1)
        d_global_pre = self.heads[0].backward(d_global)
        dcls1, dcls2 = fuse_global_backward(d_global_pre, self.head_cfg.fusion_mode)

        dtok1 = np.zeros((b, t, d))
        dtok1[:, 0] = dcls1
        dtok1[:, 1:] = pool_parts_backward(d_parts_pre[:, :k1], rows, cols)
        dtok2 = np.zeros((b, t, d))
        dtok2[:, 0] = dcls2
        dtok2[:, 1:] = pool_parts_backward(d_parts_pre[:, k1:], rows, cols)

        if self.branch2 is None:
            dtrunk = self.branch1.backward(dtok1 + dtok2)
        else:
            dtrunk = self.branch1.backward(dtok1) + self.branch2.backward(dtok2)
        dtrunk = self.backbone.backward_layers(dtrunk, self.backbone_cfg.num_layers - 1)
        self.backbone.tokenize_backward(dtrunk)

    # -- attention ------------------------------------------------------------

    def rollout_attentions(self) -> list[Array]:
        """Per-layer attention maps from the last forward pass, one [B, heads,
        N+1, N+1] array per layer; the final entry averages the two branches."""
        trunk = self.backbone.layer_attentions(self.backbone_cfg.num_layers - 1)
        last = self.branch1.last_attention
        if self.branch2 is not None:
            last = 0.5 * (last + self.branch2.last_attention)
        return trunk + [last]


# -- checkpoints ---------------------------------------------------------------


def _manifest_path(path: str) -> str:
    base, _ = os.path.splitext(path)
    return base + ".manifest.txt"


def save_checkpoint(model: MultiGrainModel, path: str) -> str:
    """Write parameters + running stats to ``path`` (npz) and a plain-text
    manifest alongside. Returns the manifest path."""
    arrays = dict(model.named_params())
    arrays.update(dict(model.named_state()))
    np.savez(path, **arrays)
    b, h = model.backbone_cfg, model.head_cfg
    lines = [f"format = {CHECKPOINT_FORMAT}"]
    for field_name in ("image_height", "image_width", "patch_size", "embed_dim",
                       "num_layers", "num_heads", "num_cameras", "camera_weight",
                       "stem_channels"):
        lines.append(f"backbone.{field_name} = {getattr(b, field_name)}")
    lines.append(f"head.partitions = {h.partitions[0]},{h.partitions[1]}")
    lines.append(f"head.duplicate_last_layer = {str(h.duplicate_last_layer).lower()}")
    lines.append(f"head.fusion_mode = {h.fusion_mode}")
    for name, arr in sorted(arrays.items()):
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"array {name} {shape}")
    mpath = _manifest_path(path)
    with open(mpath, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return mpath


def _parse_manifest(mpath: str) -> tuple[dict, dict, dict[str, tuple[int, ...]]]:
    backbone_kv: dict[str, str] = {}
    head_kv: dict[str, str] = {}
    shapes: dict[str, tuple[int, ...]] = {}
    with open(mpath, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("array "):
                try:
                    _, name, shape = line.split()
                    shapes[name] = tuple() if shape == "scalar" else tuple(
                        int(s) for s in shape.split("x"))
                except ValueError as exc:
                    raise CheckpointError(f"{mpath}:{lineno}: bad array line") from exc
                continue
            if "=" not in line:
                raise CheckpointError(f"{mpath}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "format":
                if value != CHECKPOINT_FORMAT:
                    raise CheckpointError(f"unsupported checkpoint format {value!r}")
            elif key.startswith("backbone."):
                backbone_kv[key[len("backbone."):]] = value
            elif key.startswith("head."):
                head_kv[key[len("head."):]] = value
            else:
                raise CheckpointError(f"{mpath}:{lineno}: unknown key {key!r}")
    return backbone_kv, head_kv, shapes


def load_checkpoint(path: str) -> MultiGrainModel:
    """Rebuild a model from a checkpoint, failing loudly on any mismatch
    between manifest, archive, and the freshly built model."""
    mpath = _manifest_path(path)
    if not os.path.exists(path) or not os.path.exists(mpath):
        raise CheckpointError(f"checkpoint {path} or its manifest is missing")
    backbone_kv, head_kv, shapes = _parse_manifest(mpath)
    try:
        bcfg = BackboneConfig(
            image_height=int(backbone_kv["image_height"]),
            image_width=int(backbone_kv["image_width"]),
            patch_size=int(backbone_kv["patch_size"]),
            embed_dim=int(backbone_kv["embed_dim"]),
            num_layers=int(backbone_kv["num_layers"]),
            num_heads=int(backbone_kv["num_heads"]),
            num_cameras=int(backbone_kv["num_cameras"]),
            camera_weight=float(backbone_kv["camera_weight"]),
            stem_channels=int(backbone_kv["stem_channels"]),
        )
        parts = tuple(int(s) for s in head_kv["partitions"].split(","))
        hcfg = HeadConfig(
            partitions=parts,
            duplicate_last_layer=head_kv["duplicate_last_layer"] == "true",
            fusion_mode=head_kv["fusion_mode"],
        )
    except KeyError as exc:
        raise CheckpointError(f"manifest missing config key {exc}") from exc
    model = MultiGrainModel(bcfg, hcfg, seed=0)
    model_arrays = dict(model.named_params())
    model_arrays.update(dict(model.named_state()))
    with np.load(path) as archive:
        archive_names = set(archive.files)
        expected = set(model_arrays)
        if archive_names != expected or set(shapes) != expected:
            missing = sorted(expected - archive_names)[:5]
            extra = sorted(archive_names - expected)[:5]
            raise CheckpointError(
                f"checkpoint arrays do not match model (missing={missing}, extra={extra})")
        for name, arr in model_arrays.items():
            stored = archive[name]
            if stored.shape != arr.shape or shapes[name] != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: manifest {shapes[name]}, "
                    f"archive {stored.shape}, model {arr.shape}")
            arr[...] = stored
    return model


def config_summary(model: MultiGrainModel) -> str:
    return json.dumps({
        "backbone": model.backbone_cfg.__dict__,
        "head": {**model.head_cfg.__dict__, "partitions": list(model.head_cfg.partitions)},
    }, sort_keys=True)
