"""Camera-aware pseudo-labeling: DBSCAN clustering on cosine distances, split
of clusters into per-camera proxies, and the offline/online positive/negative
proxy set construction used by the contrastive losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import ConfigurationError, InputError, LabelingError

Array = np.ndarray

OUTLIER = -1


@dataclass
class AssociationConfig:
    dbscan_eps: float = 0.5
    dbscan_min_samples: int = 4
    num_hard_negatives: int = 50
    online_topk: int = 5

    def __post_init__(self) -> None:
        if not 0 < self.dbscan_eps:
            raise ConfigurationError("dbscan_eps must be positive")
        if self.dbscan_min_samples < 1:
            raise ConfigurationError("dbscan_min_samples must be >= 1")
        if self.num_hard_negatives < 0 or self.online_topk < 0:
            raise ConfigurationError("set sizes must be >= 0")


def cosine_distances(features: Array) -> Array:
    """Pairwise cosine distance 1 - a.b for unit-norm rows, clipped to [0, 2]."""
    return np.clip(1.0 - features @ features.T, 0.0, 2.0)


def cluster(features: Array, cfg: AssociationConfig) -> Array:
    """DBSCAN on cosine distances. Returns per-image labels with OUTLIER = -1
    for noise; raises LabelingError when not a single cluster forms."""
    if features.ndim != 2 or features.shape[0] == 0:
        raise InputError("features must be a non-empty [N, D] array")
    dist = cosine_distances(features)
    labels = DBSCAN(eps=cfg.dbscan_eps, min_samples=cfg.dbscan_min_samples,
                    metric="precomputed").fit_predict(dist)
    labels = labels.astype(int)
    if (labels == OUTLIER).all():
        raise LabelingError("no clusters: every sample is a DBSCAN outlier")
    return labels


@dataclass
class ProxyLabeling:
    """Dense proxy index over (cluster, camera) pairs among non-outliers.

    pseudo_label[i] is image i's proxy index (OUTLIER for noise images);
    proxy_cluster[p] / proxy_camera[p] give each proxy's cluster and camera.
    """

    pseudo_label: Array  # [N_I] int
    proxy_cluster: Array  # [N_p] int
    proxy_camera: Array  # [N_p] int

    @property
    def num_proxies(self) -> int:
        return len(self.proxy_cluster)

    @property
    def num_clusters(self) -> int:
        return len(np.unique(self.proxy_cluster))

    def validate(self, clusters: Array, camera_ids: Array) -> None:
        """Check proxy purity and coverage against the source labeling."""
        inlier = clusters != OUTLIER
        assert (self.pseudo_label[~inlier] == OUTLIER).all(), "outlier got a proxy"
        assert (self.pseudo_label[inlier] >= 0).all(), "inlier missing a proxy"
        for p in range(self.num_proxies):
            members = self.pseudo_label == p
            assert members.any(), f"proxy {p} is empty"
            assert (clusters[members] == self.proxy_cluster[p]).all(), "cluster impurity"
            assert (camera_ids[members] == self.proxy_camera[p]).all(), "camera impurity"


def split_camera_proxies(clusters: Array, camera_ids: Array) -> ProxyLabeling:
    """Split every cluster into one proxy per camera it appears in; proxies are
    indexed densely, ordered by (cluster, camera)."""
    clusters = np.asarray(clusters, dtype=int)
    camera_ids = np.asarray(camera_ids, dtype=int)
    if clusters.shape != camera_ids.shape:
        raise InputError("clusters and camera_ids must align")
    inlier = clusters != OUTLIER
    pairs = sorted(set(zip(clusters[inlier].tolist(), camera_ids[inlier].tolist())))
    index = {pair: p for p, pair in enumerate(pairs)}
    pseudo = np.full(clusters.shape, OUTLIER, dtype=int)
    for i in np.flatnonzero(inlier):
        pseudo[i] = index[(int(clusters[i]), int(camera_ids[i]))]
    return ProxyLabeling(
        pseudo_label=pseudo,
        proxy_cluster=np.array([c for c, _ in pairs], dtype=int),
        proxy_camera=np.array([cam for _, cam in pairs], dtype=int),
    )


def _top_by_similarity(candidates: Array, sims: Array, k: int) -> Array:
    """Highest-similarity candidate proxies, ties broken by lower proxy index."""
    if k <= 0 or len(candidates) == 0:
        return np.empty(0, dtype=int)
    order = np.lexsort((candidates, -sims[candidates]))
    return candidates[order[:k]]


def offline_sets(anchor_label: int, labeling: ProxyLabeling, bank: Array,
                 anchor_feature: Array, cfg: AssociationConfig) -> tuple[Array, Array]:
    """Cluster-level sets: positives are all proxies sharing the anchor's
    cluster; negatives are the num_hard_negatives most similar other proxies."""
    if anchor_label == OUTLIER:
        raise InputError("offline sets are undefined for outlier anchors")
    own_cluster = labeling.proxy_cluster[anchor_label]
    all_proxies = np.arange(labeling.num_proxies)
    positives = all_proxies[labeling.proxy_cluster == own_cluster]
    rest = all_proxies[labeling.proxy_cluster != own_cluster]
    sims = bank @ anchor_feature
    negatives = _top_by_similarity(rest, sims, cfg.num_hard_negatives)
    return positives, negatives


def online_sets(anchor_feature: Array, anchor_camera: int, anchor_label: int,
                labeling: ProxyLabeling, bank: Array,
                cfg: AssociationConfig) -> tuple[Array, Array]:
    """Instance-level sets: the anchor's own proxy plus, for every other camera,
    that camera's most similar proxy — kept only if it ranks in the global
    online_topk by similarity. Negatives are the hardest remaining proxies."""
    if anchor_label == OUTLIER:
        raise InputError("online sets are undefined for outlier anchors")
    sims = bank @ anchor_feature
    all_proxies = np.arange(labeling.num_proxies)
    top_global = set(_top_by_similarity(all_proxies, sims, cfg.online_topk).tolist())
    chosen = [anchor_label]
    for cam in np.unique(labeling.proxy_camera):
        if cam == anchor_camera:
            continue
        members = all_proxies[labeling.proxy_camera == cam]
        best = _top_by_similarity(members, sims, 1)
        if len(best) and int(best[0]) in top_global:
            chosen.append(int(best[0]))
    positives = np.unique(np.array(chosen, dtype=int))
    rest = np.setdiff1d(all_proxies, positives, assume_unique=False)
    negatives = _top_by_similarity(rest, sims, cfg.num_hard_negatives)
    return positives, negatives


@dataclass
class AnchorSets:
    """Per-anchor proxy index sets feeding the two contrastive terms."""

    offline_positives: Array
    offline_negatives: Array
    online_positives: Array
    online_negatives: Array


def batch_sets(global_features: Array, labels: Array, camera_ids: Array,
               labeling: ProxyLabeling, bank: Array,
               cfg: AssociationConfig) -> list[AnchorSets]:
    """Build offline + online sets for a batch of (non-outlier) anchors from
    their current global features against a bank snapshot."""
    out = []
    for i in range(len(labels)):
        p1, q1 = offline_sets(int(labels[i]), labeling, bank, global_features[i], cfg)
        p2, q2 = online_sets(global_features[i], int(camera_ids[i]), int(labels[i]),
                             labeling, bank, cfg)
        out.append(AnchorSets(p1, q1, p2, q2))
    return out


def write_labeling(path: str, image_ids: list[str], clusters: Array,
                   labeling: ProxyLabeling, camera_ids: Array) -> None:
    """Dump pseudo labels as text rows: image id, cluster, proxy, camera."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("image_id\tcluster\tproxy\tcamera\n")
        for i, image_id in enumerate(image_ids):
            fh.write(f"{image_id}\t{clusters[i]}\t{labeling.pseudo_label[i]}\t{camera_ids[i]}\n")
