"""Per-proxy momentum memory banks and the camera-aware contrastive losses
(cluster-level offline term + instance-level online term), with closed-form
gradients w.r.t. the anchor features.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .association import OUTLIER, AnchorSets, ProxyLabeling
from .errors import ConfigurationError, InputError
from .nn import L2_GUARD, l2_normalize

Array = np.ndarray

GLOBAL_HEAD = 0  # head_id of the global feature; parts are 1..K


@dataclass
class MemoryConfig:
    momentum: float = 0.2
    temperature: float = 0.07

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError("memory momentum must lie in [0, 1]")
        if not self.temperature > 0.0:
            raise ConfigurationError("temperature must be positive")


@dataclass
class LossWeights:
    lambda_p: float = 0.1

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lambda_p) and self.lambda_p >= 0.0):
            raise ConfigurationError("lambda_p must be finite and >= 0")


class ProxyMemory:
    """One bank row per proxy, kept unit-norm under momentum updates:
    row <- mu * row + (1 - mu) * feature, then L2-renormalized."""

    def __init__(self, bank: Array, momentum: float, temperature: float, head_id: int):
        if bank.ndim != 2:
            raise InputError("bank must be [num_proxies, dim]")
        MemoryConfig(momentum, temperature)  # reuse range validation
        self.bank = np.asarray(bank, dtype=np.float64)
        self.momentum = momentum
        self.temperature = temperature
        self.head_id = head_id

    @classmethod
    def from_features(cls, features: Array, pseudo_labels: Array, num_proxies: int,
                      cfg: MemoryConfig, head_id: int) -> "ProxyMemory":
        """Initialize each row as the L2-normalized mean of its proxy's features."""
        if features.ndim != 2 or len(features) != len(pseudo_labels):
            raise InputError("features and pseudo_labels must align")
        bank = np.zeros((num_proxies, features.shape[1]))
        for p in range(num_proxies):
            members = pseudo_labels == p
            if not members.any():
                raise InputError(f"proxy {p} has no member images")
            bank[p] = features[members].mean(axis=0)
        bank = l2_normalize(bank)
        return cls(bank, cfg.momentum, cfg.temperature, head_id)

    def similarities(self, feature: Array) -> Array:
        return self.bank @ feature

    def update(self, label: int, feature: Array) -> None:
        """Momentum-update one row toward ``feature`` and renormalize.

        A delta of exactly zero (mu = 1, or feature == row) leaves the row
        bit-for-bit untouched; a ~zero blended row skips renormalization with
        a warning instead of dividing by nothing.
        """
        if not 0 <= label < len(self.bank):
            raise InputError(f"proxy label {label} out of range")
        row = self.bank[label]
        delta = (1.0 - self.momentum) * (feature - row)
        if not delta.any():
            return
        blended = row + delta
        norm = float(np.linalg.norm(blended))
        if norm < L2_GUARD:
            warnings.warn("memory update produced a ~zero row; renormalization skipped",
                          RuntimeWarning, stacklevel=2)
            self.bank[label] = blended
            return
        self.bank[label] = blended / norm


def contrastive_loss_and_grad(feature: Array, positives: Array, negatives: Array,
                              memory: ProxyMemory) -> tuple[float, Array]:
    """Proxy contrastive loss and its gradient w.r.t. the anchor feature.

    loss = -(1/|P|) sum_{u in P} log( exp(m_u.f/tau) / sum_{v in P u Q} exp(m_v.f/tau) )

    Gradient flows to the feature only; bank rows are treated as constants.
    The log-sum is computed with max-subtraction.
    """
    positives = np.asarray(positives, dtype=int)
    negatives = np.asarray(negatives, dtype=int)
    if len(positives) == 0:
        raise InputError("positive proxy set must be non-empty")
    if np.intersect1d(positives, negatives).size:
        raise InputError("positive and negative proxy sets must be disjoint")
    idx = np.concatenate([positives, negatives])
    if idx.min() < 0 or idx.max() >= len(memory.bank):
        raise InputError("proxy index out of bank range")

    rows = memory.bank[idx]
    logits = rows @ feature / memory.temperature
    shift = logits.max()
    exp = np.exp(logits - shift)
    lse = shift + np.log(exp.sum())
    npos = len(positives)
    loss = float(lse - logits[:npos].mean())
    softmax = exp / exp.sum()
    grad = (softmax @ rows - rows[:npos].mean(axis=0)) / memory.temperature
    return loss, grad


def contrastive_loss(feature: Array, positives: Array, negatives: Array,
                     memory: ProxyMemory) -> float:
    loss, _ = contrastive_loss_and_grad(feature, positives, negatives, memory)
    return loss


@dataclass
class TotalLossResult:
    value: float
    d_global: Array  # [B, D]
    d_parts: Array  # [B, K, D]
    global_offline: float
    global_online: float
    parts_weighted: float


def total_loss(global_features: Array, part_features: Array, sets: list[AnchorSets],
               global_memory: ProxyMemory, part_memories: list[ProxyMemory],
               weights: LossWeights) -> TotalLossResult:
    """Batch training loss, summed over anchors:

        L = L_off(g) + L_on(g) + (lambda_p / K) * sum_k [ L_off(h_k) + L_on(h_k) ]

    Part terms reuse the anchor's global positive/negative proxy sets. Returns
    the loss plus gradients w.r.t. every (normalized) input feature.
    """
    b, k = part_features.shape[0], part_features.shape[1]
    if len(sets) != b:
        raise InputError("need one AnchorSets per batch image")
    if len(part_memories) != k:
        raise InputError("need one part memory per part head")
    d_global = np.zeros_like(global_features)
    d_parts = np.zeros_like(part_features)
    off_sum = on_sum = parts_sum = 0.0
    lam = weights.lambda_p
    for i, s in enumerate(sets):
        g = global_features[i]
        loss_off, grad_off = contrastive_loss_and_grad(
            g, s.offline_positives, s.offline_negatives, global_memory)
        loss_on, grad_on = contrastive_loss_and_grad(
            g, s.online_positives, s.online_negatives, global_memory)
        off_sum += loss_off
        on_sum += loss_on
        d_global[i] = grad_off + grad_on
        if lam == 0.0:
            continue
        for j in range(k):
            h = part_features[i, j]
            p_off, gp_off = contrastive_loss_and_grad(
                h, s.offline_positives, s.offline_negatives, part_memories[j])
            p_on, gp_on = contrastive_loss_and_grad(
                h, s.online_positives, s.online_negatives, part_memories[j])
            parts_sum += (lam / k) * (p_off + p_on)
            d_parts[i, j] = (lam / k) * (gp_off + gp_on)
    value = off_sum + on_sum + parts_sum
    return TotalLossResult(value, d_global, d_parts, off_sum, on_sum, parts_sum)
