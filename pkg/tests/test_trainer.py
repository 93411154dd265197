"""Training loop: schedule, augmentation, proxy-balanced sampling, the epoch
cycle, and the end-to-end train() contract."""
import os

import numpy as np
import pytest

from mgreid.association import OUTLIER, AssociationConfig
from mgreid.backbone import BackboneConfig
from mgreid.data import (DatasetManifest, ImageRecord, SyntheticSpec,
                         generate_synthetic)
from mgreid.errors import ConfigurationError, InputError, LabelingError, ValidationError
from mgreid.heads import HeadConfig
from mgreid.memory import LossWeights, MemoryConfig
from mgreid.model import MultiGrainModel
from mgreid.trainer import (LOG_HEADER, Augmenter, ProxyBalancedSampler,
                            TrainConfig, extract_features, lr_at, train)

RNG = np.random.default_rng

TINY_BACKBONE = dict(image_height=32, image_width=32, patch_size=16, embed_dim=16,
                     num_layers=2, num_heads=2, num_cameras=3, stem_channels=8)


def tiny_setup(num_ids=4, imgs=3, noise=0.03, shift=0.2, seed=0):
    spec = SyntheticSpec(num_ids=num_ids, num_cameras=3, images_per_id_per_camera=imgs,
                         image_height=32, image_width=32, noise_sigma=noise,
                         camera_shift=shift, seed=seed)
    ds = generate_synthetic(spec)
    return ds


def tiny_configs(epochs=2, seed=0, eps=0.9, lambda_p=0.1):
    return dict(
        backbone_cfg=BackboneConfig(**TINY_BACKBONE),
        head_cfg=HeadConfig(partitions=(2, 1)),
        assoc_cfg=AssociationConfig(dbscan_eps=eps, dbscan_min_samples=2,
                                    num_hard_negatives=4, online_topk=3),
        memory_cfg=MemoryConfig(),
        weights=LossWeights(lambda_p=lambda_p),
        train_cfg=TrainConfig(epochs=epochs, warmup_epochs=0, step_epochs=(),
                              batch_size=4, seed=seed),
    )


# -- learning-rate schedule ------------------------------------------------------


def test_lr_schedule_hand_examples():
    cfg = TrainConfig(epochs=50, base_lr=3.5e-4, warmup_epochs=10,
                      warmup_start_factor=0.01, step_epochs=(20, 40), step_factor=0.1)
    assert lr_at(0, cfg) == pytest.approx(3.5e-6)       # 0.01 * base
    assert lr_at(10, cfg) == pytest.approx(3.5e-4)      # warmup complete
    assert lr_at(19, cfg) == pytest.approx(3.5e-4)
    assert lr_at(20, cfg) == pytest.approx(3.5e-5)      # first decay
    assert lr_at(40, cfg) == pytest.approx(3.5e-6)      # two decays
    assert lr_at(49, cfg) == pytest.approx(3.5e-6)


def test_lr_warmup_is_linear():
    cfg = TrainConfig(epochs=20, base_lr=1.0, warmup_epochs=10,
                      warmup_start_factor=0.5, step_epochs=())
    for e in range(10):
        assert lr_at(e, cfg) == pytest.approx(0.5 + 0.05 * e)


def test_lr_rejects_out_of_range_epoch():
    cfg = TrainConfig(epochs=5, warmup_epochs=0, step_epochs=())
    with pytest.raises(InputError):
        lr_at(5, cfg)
    with pytest.raises(InputError):
        lr_at(-1, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=6)  # not a multiple of 4
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=10, warmup_epochs=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=10, step_epochs=(4, 4))
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=10, step_epochs=(12,))


# -- augmentation -----------------------------------------------------------------


def test_augmenter_preserves_shape_and_range():
    rng = RNG(0)
    aug = Augmenter(rng, fill=np.array([0.5, 0.5, 0.5]))
    img = rng.uniform(0, 1, (32, 16, 3))
    for _ in range(20):
        out = aug(img)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augmenter_flip_only_is_involution():
    rng = RNG(1)
    aug = Augmenter(rng, fill=np.zeros(3), flip_p=1.0, erase_p=0.0)
    aug.rng = _CenterCropRng()
    img = RNG(2).uniform(0, 1, (8, 6, 3))
    np.testing.assert_allclose(aug(aug(img)), img, atol=1e-12)


class _CenterCropRng:
    """Stub rng: always flip, always center crop, never erase."""

    def random(self):
        return 0.0  # < flip_p and < erase_p (erase_p is 0 here)

    def integers(self, low, high):
        return (low + high - 1) // 2  # Augmenter.PAD -> identity crop

    def uniform(self, *a, **k):  # pragma: no cover - not used with erase_p=0
        raise AssertionError


def test_augmenter_erase_fills_with_dataset_mean():
    fill = np.array([0.1, 0.2, 0.3])
    aug = Augmenter(RNG(3), fill=fill, flip_p=0.0, erase_p=1.0)
    aug.rng = _NoShiftEraseRng()
    img = np.ones((20, 10, 3))
    out = aug(img)
    erased = np.flatnonzero((out != 1.0).any(axis=-1).reshape(-1))
    assert len(erased) > 0
    mask = (out != 1.0).any(axis=-1)
    np.testing.assert_allclose(out[mask], np.broadcast_to(fill, (mask.sum(), 3)),
                               atol=1e-12)


class _NoShiftEraseRng:
    """Stub rng: no flip, identity crop, erase a fixed block."""

    def random(self):
        return 0.0

    def integers(self, low, high):
        if high == 2 * Augmenter.PAD + 1:  # crop offset
            return Augmenter.PAD
        return low  # erase corner

    def uniform(self, low, high):
        if (low, high) == (0.02, 0.4):
            return 0.1  # erase 10% of area
        return 0.0  # log-aspect -> aspect 1


def test_augmenter_pad_zero_skips_crop_jitter():
    aug = Augmenter(RNG(8), fill=np.zeros(3), flip_p=0.0, erase_p=0.0, pad=0)
    img = RNG(9).uniform(0, 1, (8, 6, 3))
    out = aug(img)
    np.testing.assert_array_equal(out, img)
    assert out is not img  # still a defensive copy


def test_train_config_rejects_bad_augmentation():
    with pytest.raises(ConfigurationError):
        TrainConfig(flip_p=1.5)
    with pytest.raises(ConfigurationError):
        TrainConfig(erase_p=-0.1)
    with pytest.raises(ConfigurationError):
        TrainConfig(crop_pad=-1)


def test_extract_features_is_deterministic_and_batch_invariant():
    cfgs = tiny_configs()
    model = MultiGrainModel(cfgs["backbone_cfg"], cfgs["head_cfg"], seed=0)
    rng = RNG(4)
    images = rng.uniform(0, 1, (10, 32, 32, 3))
    cams = rng.integers(0, 3, 10)
    a = extract_features(model, images, cams, batch_size=3)
    b = extract_features(model, images, cams, batch_size=10)
    np.testing.assert_allclose(a.global_features, b.global_features, atol=1e-12)
    np.testing.assert_allclose(a.part_features, b.part_features, atol=1e-12)


# -- sampler ------------------------------------------------------------------------


def test_sampler_yields_proxy_balanced_batches():
    rng = RNG(5)
    labels = np.array([0] * 6 + [1] * 5 + [2] * 2 + [OUTLIER] * 4)
    sampler = ProxyBalancedSampler(labels, batch_size=8, rng=rng)
    assert sampler.num_images == 13
    batches = list(sampler.batches())
    assert len(batches) == 2  # ceil(13 / 8)
    for batch in batches:
        assert len(batch) == 8
        chosen = labels[batch]
        assert (chosen != OUTLIER).all()
        values, counts = np.unique(chosen, return_counts=True)
        assert (counts % 4 == 0).all()  # 4 instances per sampled proxy slot


def test_sampler_requires_non_outlier_images():
    with pytest.raises(LabelingError):
        ProxyBalancedSampler(np.full(5, OUTLIER), batch_size=4, rng=RNG(6))


def test_sampler_small_proxy_resamples_with_replacement():
    labels = np.array([0, 0, 1])  # proxy 1 has a single image
    sampler = ProxyBalancedSampler(labels, batch_size=4, rng=RNG(7))
    for batch in sampler.batches():
        assert len(batch) == 4


# -- end-to-end train() ---------------------------------------------------------------


def test_train_runs_and_writes_artifacts(tmp_path):
    ds = tiny_setup()
    cfgs = tiny_configs()
    out = str(tmp_path / "run")
    result = train(ds.manifest, ds.source(), out_dir=out, **cfgs)
    assert len(result.reports) == 2
    assert result.final_checkpoint == os.path.join(out, "checkpoint_final.npz")
    assert os.path.exists(result.final_checkpoint)
    assert os.path.exists(os.path.join(out, "checkpoint_epoch000.npz"))
    assert os.path.exists(os.path.join(out, "labeling_epoch000.txt"))
    log = open(os.path.join(out, "loss_log.csv")).read().splitlines()
    assert log[0] == LOG_HEADER
    assert len(log) == 1 + len(result.history)
    for report in result.reports:
        assert report.steps > 0
        assert report.num_proxies >= report.num_clusters
        assert np.isfinite(report.mean_total)


def test_train_is_deterministic_for_fixed_seed(tmp_path):
    ds = tiny_setup()
    r1 = train(ds.manifest, ds.source(), **tiny_configs(seed=3))
    r2 = train(ds.manifest, ds.source(), **tiny_configs(seed=3))
    assert r1.history == r2.history
    for (n1, p1), (n2, p2) in zip(r1.model.named_params(), r2.model.named_params()):
        assert n1 == n2
        np.testing.assert_array_equal(p1, p2)


def test_train_different_seeds_differ():
    ds = tiny_setup()
    r1 = train(ds.manifest, ds.source(), **tiny_configs(seed=0, epochs=1))
    r2 = train(ds.manifest, ds.source(), **tiny_configs(seed=1, epochs=1))
    assert r1.history != r2.history


class _SpyRecord(ImageRecord):
    """ImageRecord that counts person_id reads."""

    reads = 0

    def __getattribute__(self, name):
        if name == "person_id":
            _SpyRecord.reads += 1
        return object.__getattribute__(self, name)


def spy_manifest(manifest):
    return DatasetManifest([
        _SpyRecord(r.path, r.person_id, r.camera_id, r.split) for r in manifest.records
    ])


def test_unsupervised_training_never_reads_person_ids():
    ds = tiny_setup()
    spied = spy_manifest(ds.manifest)
    _SpyRecord.reads = 0
    train(spied, ds.source(), **tiny_configs(epochs=1))
    assert _SpyRecord.reads == 0


def test_ground_truth_mode_reads_person_ids_and_uses_them():
    ds = tiny_setup()
    spied = spy_manifest(ds.manifest)
    _SpyRecord.reads = 0
    result = train(spied, ds.source(), use_ground_truth=True, **tiny_configs(epochs=1))
    assert _SpyRecord.reads > 0
    # with ground-truth clusters, cluster count equals the number of ids
    assert result.reports[0].num_clusters == 4
    assert result.reports[0].num_outliers == 0


def test_ground_truth_mode_requires_ids():
    ds = tiny_setup()
    stripped = DatasetManifest([
        ImageRecord(r.path, None, r.camera_id, r.split) if r.split == "train" else r
        for r in ds.manifest.records
    ])
    with pytest.raises(ValidationError):
        train(stripped, ds.source(), use_ground_truth=True, **tiny_configs(epochs=1))


def test_clustering_failure_names_the_epoch():
    ds = tiny_setup()
    cfgs = tiny_configs(epochs=1)
    cfgs["assoc_cfg"] = AssociationConfig(dbscan_eps=1e-9,
                                          dbscan_min_samples=40,
                                          num_hard_negatives=4, online_topk=3)
    with pytest.raises(LabelingError, match="epoch 0 aborted"):
        train(ds.manifest, ds.source(), **cfgs)


def test_train_rejects_empty_train_split():
    ds = tiny_setup()
    queries_only = DatasetManifest([r for r in ds.manifest.records if r.split != "train"])
    with pytest.raises(ValidationError):
        train(queries_only, ds.source(), **tiny_configs(epochs=1))


def test_train_rejects_wrong_image_size():
    ds = tiny_setup()
    cfgs = tiny_configs(epochs=1)
    cfgs["backbone_cfg"] = BackboneConfig(**{**TINY_BACKBONE, "image_height": 64,
                                             "image_width": 32})
    with pytest.raises(ValidationError):
        train(ds.manifest, ds.source(), **cfgs)


def test_train_rejects_camera_out_of_config_range():
    ds = tiny_setup()  # cameras 0..2
    cfgs = tiny_configs(epochs=1)
    cfgs["backbone_cfg"] = BackboneConfig(**{**TINY_BACKBONE, "num_cameras": 2})
    with pytest.raises(ValidationError):
        train(ds.manifest, ds.source(), **cfgs)
