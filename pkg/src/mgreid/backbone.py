"""Dual-resolution transformer backbone: conv stem, patch tokens, camera-aware
position embedding, and a stack of pre-LN transformer layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, InputError, NumericError

Array = np.ndarray


@dataclass
class BackboneConfig:
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 16
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    num_cameras: int = 4
    camera_weight: float = 3.0
    stem_channels: int = 32

    def __post_init__(self) -> None:
        if min(self.image_height, self.image_width, self.patch_size, self.embed_dim,
               self.num_layers, self.num_heads, self.num_cameras, self.stem_channels) <= 0:
            raise ConfigurationError("backbone dimensions must all be positive")
        if self.patch_size % 2:
            raise ConfigurationError("patch_size must be even (stem halves resolution)")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigurationError(
                f"image {self.image_height}x{self.image_width} not divisible by "
                f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.stem_channels % 2:
            raise ConfigurationError("stem_channels must be even (split-half IBN)")
        if self.camera_weight < 0 or not np.isfinite(self.camera_weight):
            raise ConfigurationError("camera_weight must be finite and non-negative")

    @property
    def grid_rows(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_cols(self) -> int:
        return self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @classmethod
    def small_vit(cls, num_cameras: int, image_height: int = 384, image_width: int = 128) -> "BackboneConfig":
        """Full-size preset: 384x128 input, ViT-Small trunk (12 layers, 6 heads, dim 384)."""
        return cls(image_height=image_height, image_width=image_width, patch_size=16,
                   embed_dim=384, num_layers=12, num_heads=6, num_cameras=num_cameras,
                   stem_channels=64)


@dataclass
class TokenSequence:
    """A batch of token sequences [B, N+1, D]; index 0 is the cls token and the
    N local tokens follow in row-major grid order (grid_rows x grid_cols)."""

    tokens: Array
    grid_rows: int
    grid_cols: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3:
            raise InputError("tokens must be [batch, N+1, dim]")
        if self.tokens.shape[1] != self.grid_rows * self.grid_cols + 1:
            raise InputError("token count does not match grid plus cls")

    @property
    def cls(self) -> Array:
        return self.tokens[:, 0, :]

    @property
    def locals(self) -> Array:
        return self.tokens[:, 1:, :]


class Stem(nn.Module):
    """Stride-2 conv block with split-half IBN: instance norm on the first half
    of the channels, batch norm on the second half, then ReLU."""

    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        self.half = channels // 2
        self.conv = self.add_child("conv", nn.Conv3x3Stride2(rng, 3, channels))
        self.inorm = self.add_child("inorm", nn.InstanceNorm(self.half))
        self.bnorm = self.add_child("bnorm", nn.BatchNorm(channels - self.half))
        self.relu = self.add_child("relu", nn.ReLU())

    def forward(self, x: Array, train: bool) -> Array:
        y = self.conv.forward(x)
        y = np.concatenate(
            [self.inorm.forward(y[..., : self.half]),
             self.bnorm.forward(y[..., self.half :], train)], axis=-1)
        return self.relu.forward(y)

    def backward(self, dout: Array) -> Array:
        dy = self.relu.backward(dout)
        dconv = np.concatenate(
            [self.inorm.backward(dy[..., : self.half]),
             self.bnorm.backward(dy[..., self.half :])], axis=-1)
        return self.conv.backward(dconv)


def _patchify(x: Array, patch: int) -> Array:
    """[B, H2, W2, C] -> [B, N, patch*patch*C] in row-major patch order."""
    b, h2, w2, c = x.shape
    rows, cols = h2 // patch, w2 // patch
    x = x.reshape(b, rows, patch, cols, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, rows * cols, patch * patch * c)


def _unpatchify(d: Array, h2: int, w2: int, patch: int) -> Array:
    b, n, flat = d.shape
    rows, cols = h2 // patch, w2 // patch
    c = flat // (patch * patch)
    d = d.reshape(b, rows, cols, patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return d.reshape(b, h2, w2, c)


class Backbone(nn.Module):
    """Token pipeline: stem -> patch projection -> cls/position/camera embeddings
    -> pre-LN transformer layers."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.stem = self.add_child("stem", Stem(rng, cfg.stem_channels))
        half_patch = cfg.patch_size // 2
        self.proj = self.add_child(
            "proj", nn.Linear(rng, half_patch * half_patch * cfg.stem_channels, d))
        self._register("cls_token", nn.trunc_normal(rng, (d,)))
        self._register("pos_embed", nn.trunc_normal(rng, (cfg.num_patches + 1, d)))
        self._register("camera_embed", nn.trunc_normal(rng, (cfg.num_cameras, d)))
        self.layers = [
            self.add_child(f"layers.{i}", nn.TransformerLayer(rng, d, cfg.num_heads))
            for i in range(cfg.num_layers)
        ]

    param_names = ("cls_token", "pos_embed", "camera_embed")

    # -- tokenization ------------------------------------------------------

    def _check_inputs(self, images: Array, camera_ids: Array) -> tuple[Array, Array]:
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != (self.cfg.image_height, self.cfg.image_width, 3):
            raise InputError(
                f"expected images [B, {self.cfg.image_height}, {self.cfg.image_width}, 3], "
                f"got {images.shape}")
        camera_ids = np.atleast_1d(np.asarray(camera_ids))
        if camera_ids.shape != (images.shape[0],):
            raise InputError("camera_ids must have one entry per image")
        if ((camera_ids < 0) | (camera_ids >= self.cfg.num_cameras)).any():
            raise InputError(f"camera ids must lie in [0, {self.cfg.num_cameras})")
        return np.asarray(images, dtype=np.float64), camera_ids.astype(int)

    def tokenize(self, images: Array, camera_ids, train: bool = False) -> TokenSequence:
        """Embed images (plus their camera ids) into token sequences.

        The stem halves the resolution, patches of side patch_size/2 on the stem
        map (= patch_size on the image) are flattened and projected to embed_dim,
        a learned cls token is prepended, and position plus camera_weight-scaled
        camera embeddings are added to every token.
        """
        images, camera_ids = self._check_inputs(images, camera_ids)
        b = images.shape[0]
        cfg = self.cfg
        fmap = self.stem.forward(images, train)
        patches = _patchify(fmap, cfg.patch_size // 2)
        tok = self.proj.forward(patches)
        tok = np.concatenate([np.tile(self.cls_token, (b, 1, 1)), tok], axis=1)
        tok = tok + self.pos_embed
        tok = tok + cfg.camera_weight * self.camera_embed[camera_ids][:, None, :]
        self._token_cache = (camera_ids, fmap.shape)
        return TokenSequence(tok, cfg.grid_rows, cfg.grid_cols)

    def tokenize_backward(self, dtokens: Array) -> None:
        camera_ids, fmap_shape = self._token_cache
        cw = self.cfg.camera_weight
        self.d_cls_token += dtokens[:, 0, :].sum(axis=0)
        self.d_pos_embed += dtokens.sum(axis=0)
        per_image = dtokens.sum(axis=1)  # [B, D]
        np.add.at(self.d_camera_embed, camera_ids, cw * per_image)
        dpatches = self.proj.backward(dtokens[:, 1:, :])
        dfmap = _unpatchify(dpatches, fmap_shape[1], fmap_shape[2], self.cfg.patch_size // 2)
        self.stem.backward(dfmap)

    # -- transformer trunk -------------------------------------------------

    def forward_layers(self, seq: TokenSequence, upto: int) -> TokenSequence:
        """Apply transformer layers 1..upto to the token sequence.

        Raises NumericError naming the offending layer if activations go
        non-finite.
        """
        if not 0 <= upto <= len(self.layers):
            raise InputError(f"upto must be in [0, {len(self.layers)}]")
        x = seq.tokens
        for i in range(upto):
            x = self.layers[i].forward(x)
            if not np.isfinite(x).all():
                raise NumericError(f"non-finite activations after transformer layer {i}")
        return TokenSequence(x, seq.grid_rows, seq.grid_cols)

    def backward_layers(self, dout: Array, upto: int) -> Array:
        for i in reversed(range(upto)):
            dout = self.layers[i].backward(dout)
        return dout

    def layer_attentions(self, upto: int) -> list[Array]:
        """Attention maps [B, heads, N+1, N+1] captured by the last forward."""
        return [self.layers[i].last_attention for i in range(upto)]
