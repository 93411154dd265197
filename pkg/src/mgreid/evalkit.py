"""Retrieval evaluation (mAP / CMC under the cross-camera Re-ID protocol), a
naive evaluation oracle for tests, and attention-rollout heat maps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

Array = np.ndarray

JUNK_ID = -1
DEGENERATE_SPAN = 1e-12


@dataclass
class RetrievalResult:
    mean_ap: float
    cmc: Array  # cmc[k-1] = Rank-k hit rate over valid queries
    per_query_ap: Array  # NaN for invalid queries
    valid: Array  # bool mask over queries
    valid_query_count: int


def _check_eval_inputs(query_features, query_ids, query_cams,
                       gallery_features, gallery_ids, gallery_cams) -> None:
    if query_features.ndim != 2 or gallery_features.ndim != 2:
        raise InputError("features must be 2-D [num, dim]")
    if query_features.shape[1] != gallery_features.shape[1]:
        raise InputError("query and gallery feature dims differ")
    for arr, n in ((query_ids, len(query_features)), (query_cams, len(query_features)),
                   (gallery_ids, len(gallery_features)), (gallery_cams, len(gallery_features))):
        if len(arr) != n:
            raise InputError("metadata length does not match features")


def evaluate(query_features: Array, query_ids, query_cams,
             gallery_features: Array, gallery_ids, gallery_cams,
             max_rank: int = 10) -> RetrievalResult:
    """Standard single-query Re-ID evaluation.

    For each query the gallery is ranked by cosine similarity (descending,
    ties broken by gallery index ascending); gallery images sharing BOTH the
    query's id and camera are excluded, junk entries (id == -1) are ignored
    entirely, and queries left with zero relevant items are excluded from the
    averages. AP is the mean of precision-at-r over the relevant positions r.
    No re-ranking or other post-processing.
    """
    query_ids = np.asarray(query_ids, dtype=int)
    query_cams = np.asarray(query_cams, dtype=int)
    gallery_ids = np.asarray(gallery_ids, dtype=int)
    gallery_cams = np.asarray(gallery_cams, dtype=int)
    _check_eval_inputs(query_features, query_ids, query_cams,
                       gallery_features, gallery_ids, gallery_cams)

    real = gallery_ids != JUNK_ID
    gallery_features = gallery_features[real]
    gallery_ids = gallery_ids[real]
    gallery_cams = gallery_cams[real]

    nq = len(query_features)
    sims = query_features @ gallery_features.T
    per_query_ap = np.full(nq, np.nan)
    valid = np.zeros(nq, dtype=bool)
    cmc_hits = np.zeros(max_rank)

    for i in range(nq):
        keep = ~((gallery_ids == query_ids[i]) & (gallery_cams == query_cams[i]))
        if not keep.any():
            continue
        order = np.argsort(-sims[i][keep], kind="stable")
        matches = (gallery_ids[keep][order] == query_ids[i])
        if not matches.any():
            continue
        valid[i] = True
        cum = np.cumsum(matches)
        pos = np.flatnonzero(matches)
        per_query_ap[i] = float((cum[pos] / (pos + 1)).mean())
        first_hit = pos[0]
        if first_hit < max_rank:
            cmc_hits[first_hit:] += 1.0

    valid_count = int(valid.sum())
    if valid_count == 0:
        return RetrievalResult(float("nan"), np.full(max_rank, np.nan),
                               per_query_ap, valid, 0)
    return RetrievalResult(
        mean_ap=float(np.nanmean(per_query_ap)),
        cmc=cmc_hits / valid_count,
        per_query_ap=per_query_ap,
        valid=valid,
        valid_query_count=valid_count,
    )


def oracle_evaluate(query_features: Array, query_ids, query_cams,
                    gallery_features: Array, gallery_ids, gallery_cams,
                    max_rank: int = 10) -> RetrievalResult:
    """Deliberately naive re-implementation of evaluate(): explicit python
    sorting and counting, no vectorized shortcuts. Test use only."""
    query_ids = [int(x) for x in query_ids]
    query_cams = [int(x) for x in query_cams]
    gallery_ids = [int(x) for x in gallery_ids]
    gallery_cams = [int(x) for x in gallery_cams]

    nq = len(query_features)
    per_query_ap = np.full(nq, np.nan)
    valid = np.zeros(nq, dtype=bool)
    cmc_hits = [0] * max_rank

    for i in range(nq):
        ranked = []
        for j in range(len(gallery_features)):
            if gallery_ids[j] == JUNK_ID:
                continue
            if gallery_ids[j] == query_ids[i] and gallery_cams[j] == query_cams[i]:
                continue
            sim = float(np.dot(query_features[i], gallery_features[j]))
            ranked.append((-sim, j, gallery_ids[j]))
        ranked.sort()
        num_relevant_seen = 0
        precisions = []
        first_hit = None
        for rank0, (_, _, gid) in enumerate(ranked):
            if gid == query_ids[i]:
                num_relevant_seen += 1
                precisions.append(num_relevant_seen / (rank0 + 1))
                if first_hit is None:
                    first_hit = rank0
        if not precisions:
            continue
        valid[i] = True
        per_query_ap[i] = sum(precisions) / len(precisions)
        for k in range(max_rank):
            if first_hit <= k:
                cmc_hits[k] += 1

    valid_count = int(valid.sum())
    if valid_count == 0:
        return RetrievalResult(float("nan"), np.full(max_rank, np.nan),
                               per_query_ap, valid, 0)
    aps = [per_query_ap[i] for i in range(nq) if valid[i]]
    return RetrievalResult(
        mean_ap=sum(aps) / len(aps),
        cmc=np.array(cmc_hits, dtype=float) / valid_count,
        per_query_ap=per_query_ap,
        valid=valid,
        valid_query_count=valid_count,
    )


@dataclass
class RolloutResult:
    heat: Array  # [grid_rows, grid_cols] min-max normalized; zeros when degenerate
    raw: Array  # [grid_rows, grid_cols] cls-row attention mass, pre-normalization
    matrices: list  # accumulated rollout matrix after each layer
    degenerate: bool


def attention_rollout(attentions, grid_rows: int, grid_cols: int) -> RolloutResult:
    """Roll per-layer attention maps into a cls-to-patch heat map.

    Per layer: average heads, mix with identity (0.5 A + 0.5 I), renormalize
    rows, and left-multiply into the running product. The cls row of the final
    product, restricted to local-token columns, becomes the grid map; a
    constant map (e.g. from identity attention) is flagged degenerate and
    min-max normalization is skipped in favour of zeros.
    """
    if not attentions:
        raise InputError("need at least one attention layer")
    t = grid_rows * grid_cols + 1
    rollout = np.eye(t)
    matrices = []
    for layer_index, attn in enumerate(attentions):
        a = np.asarray(attn, dtype=np.float64)
        if a.ndim == 4:
            if a.shape[0] != 1:
                raise InputError("rollout expects attentions for a single image")
            a = a[0]
        if a.ndim != 3 or a.shape[1] != a.shape[2]:
            raise InputError(f"layer {layer_index}: attention must be [heads, T, T]")
        if a.shape[1] != t:
            raise InputError(f"layer {layer_index}: expected {t} tokens, got {a.shape[1]}")
        mixed = 0.5 * a.mean(axis=0) + 0.5 * np.eye(t)
        mixed /= mixed.sum(axis=1, keepdims=True)
        rollout = mixed @ rollout
        matrices.append(rollout.copy())
    raw = rollout[0, 1:].reshape(grid_rows, grid_cols)
    span = float(raw.max() - raw.min())
    if span < DEGENERATE_SPAN:
        return RolloutResult(np.zeros_like(raw), raw, matrices, True)
    heat = (raw - raw.min()) / span
    return RolloutResult(heat, raw, matrices, False)
