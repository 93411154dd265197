"""Label-free pseudo-labeling: DBSCAN clusters plus camera-aware proxies.

Extracts untrained features from the synthetic benchmark, clusters them on
cosine distance at a few radii, and shows how each cluster is split into one
proxy per camera — the unit the contrastive losses and memory banks work on.
No person identity is read anywhere in this pipeline; ids appear below only to
audit the clustering after the fact.
Run as:  python3 demos/03_pseudo_labels.py
"""
import numpy as np

from mgreid.association import (OUTLIER, AssociationConfig, cluster,
                                split_camera_proxies)
from mgreid.backbone import BackboneConfig
from mgreid.data import SyntheticSpec, generate_synthetic
from mgreid.heads import HeadConfig
from mgreid.model import MultiGrainModel
from mgreid.trainer import extract_features


def purity(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of clustered images whose cluster's majority id is their id."""
    keep = labels != OUTLIER
    if not keep.any():
        return float("nan")
    good = 0
    for c in np.unique(labels[keep]):
        ids, counts = np.unique(truth[labels == c], return_counts=True)
        good += int(counts.max())
    return good / int(keep.sum())


def main() -> None:
    spec = SyntheticSpec(num_ids=16, num_cameras=4, images_per_id_per_camera=8,
                         noise_sigma=0.03, camera_shift=0.4, seed=0)
    dataset = generate_synthetic(spec)
    records = dataset.manifest.split("train")
    source = dataset.source()
    images = np.stack([np.asarray(source.get(r.path), dtype=np.float64) / 255.0
                       for r in records])
    cameras = np.array([r.camera_id for r in records])
    truth = np.array([r.person_id for r in records])  # audit only

    model = MultiGrainModel(
        BackboneConfig(camera_weight=1.0), HeadConfig(), seed=0)
    feats = extract_features(model, images, cameras).global_features
    print(f"{len(records)} train images ({spec.num_ids} ids x {spec.num_cameras} "
          f"cameras), untrained global features {feats.shape}\n")

    print(f"{'eps':>6} {'clusters':>9} {'proxies':>8} {'outliers':>9} "
          f"{'id purity':>10}   comment")
    for eps, comment in (
        (0.002, "below most block radii: few blocks cluster, rest are outliers"),
        (0.005, "pins (id, camera) blocks as clusters: pure pseudo-labels"),
        (0.05, "bridges ids within a camera: 4 camera blobs, purity collapses"),
        (0.5, "bridges cameras too: one cluster containing everything"),
    ):
        cfg = AssociationConfig(dbscan_eps=eps, dbscan_min_samples=3)
        try:
            labels = cluster(feats, cfg)
        except Exception as exc:  # all-outlier radii raise rather than return junk
            print(f"{eps:>6} {'—':>9} {'—':>8} {'—':>9} {'—':>10}   raised: {exc}")
            continue
        proxies = split_camera_proxies(labels, cameras)
        n_out = int((labels == OUTLIER).sum())
        n_clu = len(np.unique(labels[labels != OUTLIER]))
        print(f"{eps:>6} {n_clu:>9} {proxies.num_proxies:>8} {n_out:>9} "
              f"{purity(labels, truth):>10.3f}   {comment}")

    cfg = AssociationConfig(dbscan_eps=0.005, dbscan_min_samples=3)
    proxies = split_camera_proxies(cluster(feats, cfg), cameras)
    print("\nwith eps=0.005 every proxy is one (cluster, camera) cell:")
    for p in range(3):
        members = np.flatnonzero(proxies.pseudo_label == p)
        print(f"  proxy {p}: cluster {proxies.proxy_cluster[p]}, camera "
              f"{proxies.proxy_camera[p]}, {len(members)} images "
              f"(ids seen: {sorted(set(truth[members].tolist()))})")
    print("  ...")
    print("\nProxies — not clusters — index the memory banks: images of one "
          "cluster seen by different\ncameras keep separate bank rows, so "
          "camera style cannot hide inside a single averaged centroid.")


if __name__ == "__main__":
    main()
