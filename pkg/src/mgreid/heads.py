"""Multi-grained feature heads: dual final-layer branches, horizontal stripe
pooling at two granularities, cls fusion, and per-head BN + L2 normalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .backbone import TokenSequence
from .errors import ConfigurationError, InputError

Array = np.ndarray

FUSION_MODES = ("avg", "branch1", "branch2")


@dataclass
class HeadConfig:
    partitions: tuple[int, int] = (2, 3)
    duplicate_last_layer: bool = True
    fusion_mode: str = "avg"

    def __post_init__(self) -> None:
        self.partitions = tuple(int(k) for k in self.partitions)
        if len(self.partitions) != 2 or any(k < 1 for k in self.partitions):
            raise ConfigurationError("partitions must be two integers >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}")

    @property
    def num_parts(self) -> int:
        return self.partitions[0] + self.partitions[1]


def stripe_row_counts(grid_rows: int, k: int) -> list[int]:
    """Split grid_rows into k contiguous horizontal stripes, larger stripes first
    when the rows do not divide evenly."""
    if not 1 <= k <= grid_rows:
        raise ConfigurationError(f"cannot cut {grid_rows} grid rows into {k} stripes")
    base, extra = divmod(grid_rows, k)
    return [base + 1 if i < extra else base for i in range(k)]


def pool_parts(seq: TokenSequence, k: int) -> Array:
    """Mean-pool the local tokens into k horizontal stripe features.

    The N local tokens are read as a row-major (grid_rows x grid_cols) grid and
    cut into k stripes of contiguous rows (ceil-sized stripes first); each part
    is the mean of its stripe's tokens. Returns [B, k, D] (un-normalized).
    """
    counts = stripe_row_counts(seq.grid_rows, k)
    b, _, d = seq.tokens.shape
    grid = seq.locals.reshape(b, seq.grid_rows, seq.grid_cols, d)
    out = np.empty((b, k, d))
    row = 0
    for i, c in enumerate(counts):
        out[:, i] = grid[:, row : row + c].mean(axis=(1, 2))
        row += c
    return out


def pool_parts_backward(dparts: Array, grid_rows: int, grid_cols: int) -> Array:
    """Gradient of pool_parts w.r.t. the local tokens: [B, k, D] -> [B, N, D]."""
    b, k, d = dparts.shape
    counts = stripe_row_counts(grid_rows, k)
    dgrid = np.zeros((b, grid_rows, grid_cols, d))
    row = 0
    for i, c in enumerate(counts):
        dgrid[:, row : row + c] += dparts[:, i][:, None, None, :] / (c * grid_cols)
        row += c
    return dgrid.reshape(b, grid_rows * grid_cols, d)


def fuse_global(cls1: Array, cls2: Array, mode: str) -> Array:
    """Fuse the two branch cls tokens into the global pre-norm feature."""
    if mode == "avg":
        return 0.5 * (cls1 + cls2)
    if mode == "branch1":
        return np.array(cls1, copy=True)
    if mode == "branch2":
        return np.array(cls2, copy=True)
    raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}")


def fuse_global_backward(dout: Array, mode: str) -> tuple[Array, Array]:
    if mode == "avg":
        return 0.5 * dout, 0.5 * dout
    if mode == "branch1":
        return dout, np.zeros_like(dout)
    return np.zeros_like(dout), dout


class FeatureHead(nn.Module):
    """Per-head batch normalization followed by L2 normalization."""

    def __init__(self, dim: int):
        super().__init__()
        self.bn = self.add_child("bn", nn.BatchNorm(dim))

    def forward(self, x: Array, train: bool) -> Array:
        if x.ndim != 2:
            raise InputError("head input must be [batch, dim]")
        y = self.bn.forward(x, train)
        self._norms = np.linalg.norm(y, axis=-1, keepdims=True)
        out = nn.l2_normalize(y)
        self._out = out
        return out

    def backward(self, dout: Array) -> Array:
        dy = nn.l2_normalize_backward(dout, self._out, self._norms)
        return self.bn.backward(dy)
