import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from synthdet.geometry import Pose
from synthdet.toyworld import (
    Batch,
    DatasetManifest,
    LabelAccessError,
    LabeledBatch,
    SceneObject,
    SceneSpec,
    WorldConfig,
    generate_background_collection,
    generate_source_collection,
    generate_target_collection,
    iterate_batches,
    render_scene,
    sample_pose,
    scene_oracle_boxes,
)


@pytest.fixture(scope="module")
def world():
    return WorldConfig()


def make_spec(world, poses, seeds=None, bg_seed=7):
    seeds = seeds or [100 + i for i in range(len(poses))]
    objs = [SceneObject("car", p, s) for p, s in zip(poses, seeds)]
    return SceneSpec(objs, bg_seed, world.camera())


def test_empty_scene_is_background_only(world):
    image, boxes = render_scene(make_spec(world, []), world.source, world)
    assert image.shape == (64, 64, 3)
    assert image.dtype == np.uint8
    assert boxes == []


def test_centered_object_symmetric_annotation(world):
    spec = make_spec(world, [Pose(0.0, 0.0, 5.0)])
    _, boxes = render_scene(spec, world.source, world)
    (box,) = boxes
    assert box.x_min + box.x_max == pytest.approx(64.0, abs=1e-6)


def test_render_deterministic(world):
    spec = make_spec(world, [Pose(1.0, 0.4, 5.0)], bg_seed=3)
    img1, _ = render_scene(spec, world.source, world)
    img2, _ = render_scene(spec, world.source, world)
    np.testing.assert_array_equal(img1, img2)


def test_object_pixels_differ_from_background(world):
    spec = make_spec(world, [Pose(0.5, 0.0, 4.5)])
    with_obj, (box,) = render_scene(spec, world.source, world)
    without, _ = render_scene(make_spec(world, [], bg_seed=7), world.source, world)
    ys = slice(int(box.y_min) + 2, int(box.y_max) - 2)
    xs = slice(int(box.x_min) + 2, int(box.x_max) - 2)
    diff = np.abs(with_obj[ys, xs].astype(int) - without[ys, xs].astype(int))
    assert diff.mean() > 5.0


def test_oracle_boxes_cover_rendered_pixels(world):
    # every pixel the object rasterizes to must fall inside its oracle box
    spec = make_spec(world, [Pose(2.2, 0.8, 5.5)])
    with_obj, (box,) = render_scene(spec, world.source, world)
    without, _ = render_scene(make_spec(world, [], bg_seed=7), world.source, world)
    changed = np.argwhere(np.abs(with_obj.astype(int) - without.astype(int)).sum(axis=2) > 12)
    assert len(changed) > 0
    ys, xs = changed[:, 0], changed[:, 1]
    assert xs.min() >= math.floor(box.x_min)
    assert xs.max() <= math.ceil(box.x_max)
    assert ys.min() >= math.floor(box.y_min)
    assert ys.max() <= math.ceil(box.y_max)


def test_generate_source_collection(tmp_path, world):
    manifest = generate_source_collection(world, 12, seed=0, out_root=tmp_path)
    assert len(manifest) == 12
    assert all(rec.object_count == 1 for rec in manifest.records)
    assert all(manifest.image_path(i).exists() for i in range(12))
    reloaded = DatasetManifest.load(tmp_path / "source_train")
    assert [r.file_name for r in reloaded.records] == [
        r.file_name for r in manifest.records
    ]
    assert reloaded.oracle_boxes(0)[0].as_tuple() == pytest.approx(
        manifest.oracle_boxes(0)[0].as_tuple()
    )


def test_different_seeds_differ(tmp_path, world):
    m1 = generate_source_collection(world, 4, seed=0, out_root=tmp_path / "a")
    m2 = generate_source_collection(world, 4, seed=1, out_root=tmp_path / "b")
    diffs = [
        not np.array_equal(m1.load_image(i), m2.load_image(i)) for i in range(4)
    ]
    assert all(diffs)


def test_target_counts_within_range(tmp_path, world):
    manifest = generate_target_collection(world, 30, seed=0, out_root=tmp_path)
    counts = [rec.object_count for rec in manifest.records]
    assert all(0 <= c <= world.k_max for c in counts)
    assert manifest.domain == "target"
    for i, rec in enumerate(manifest.records):
        assert len(manifest.oracle_boxes(i)) <= rec.object_count


def test_target_count_distribution(tmp_path, world):
    manifest = generate_target_collection(world, 600, seed=3, out_root=tmp_path)
    counts = np.bincount([r.object_count for r in manifest.records],
                         minlength=world.k_max + 1)
    expected = np.asarray(world.target_count_probs) * 600
    chi2 = ((counts - expected) ** 2 / expected).sum()
    p = 1 - stats.chi2.cdf(chi2, df=world.k_max)
    assert p > 0.01


def test_depth_distribution_uniform(world):
    rng = np.random.default_rng(0)
    depths = np.array([sample_pose(rng, world, world.source).depth
                       for _ in range(5000)])
    lo, hi = world.source.depth_range
    assert stats.kstest(depths, "uniform", args=(lo, hi - lo)).pvalue > 0.01


def test_domain_gap_in_pixel_statistics(world):
    # mean per-channel statistics differ by >= 3 sigma over renders
    rng = np.random.default_rng(5)
    n = 220

    def channel_means(domain, seed0):
        means = []
        for i in range(n):
            spec = SceneSpec(
                [SceneObject("car", sample_pose(rng, world, domain), seed0 + i)],
                seed0 + 10_000 + i,
                world.camera(),
            )
            img, _ = render_scene(spec, domain, world)
            means.append(img.mean(axis=(0, 1)))
        return np.asarray(means)

    src = channel_means(world.source, 0)
    tgt = channel_means(world.target, 50_000)
    gap = np.abs(src.mean(axis=0) - tgt.mean(axis=0))
    sigma = np.sqrt(src.var(axis=0) / n + tgt.var(axis=0) / n)
    assert np.all(gap >= 3 * sigma)


def test_hidden_manifest_raises(tmp_path, world):
    manifest = generate_source_collection(world, 4, seed=0, out_root=tmp_path)
    hidden = manifest.hidden()
    with pytest.raises(LabelAccessError):
        hidden.oracle_boxes(0)
    with pytest.raises(LabelAccessError):
        hidden.oracle_poses(0)
    # the original view still serves evaluation
    assert manifest.oracle_boxes(0)


def test_iterate_batches_sizes_and_order(tmp_path, world):
    manifest = generate_source_collection(world, 10, seed=0, out_root=tmp_path)
    batches = list(iterate_batches(manifest, 4, seed=1))
    assert [len(b.indices) for b in batches] == [4, 4, 2]
    again = list(iterate_batches(manifest, 4, seed=1))
    assert [b.indices for b in batches] == [b.indices for b in again]
    other_epoch = list(iterate_batches(manifest, 4, seed=1, epoch=1))
    assert [b.indices for b in other_epoch] != [b.indices for b in batches]


def test_iterate_batches_label_contract(tmp_path, world):
    manifest = generate_source_collection(world, 6, seed=0, out_root=tmp_path)
    labeled = next(iterate_batches(manifest, 3, seed=0))
    assert isinstance(labeled, LabeledBatch)
    assert len(labeled.annotations) == 3
    hidden = next(iterate_batches(manifest, 3, seed=0, hide_labels=True))
    assert type(hidden) is Batch
    assert not hasattr(hidden, "annotations")
    with pytest.raises(LabelAccessError):
        next(iterate_batches(manifest.hidden(), 3, seed=0, hide_labels=False))


def test_iterate_batches_validation(tmp_path, world):
    manifest = generate_source_collection(world, 3, seed=0, out_root=tmp_path)
    with pytest.raises(ValueError):
        next(iterate_batches(manifest, 0, seed=0))
    empty = dataclasses.replace(manifest, records=[])
    with pytest.raises(ValueError):
        next(iterate_batches(empty, 2, seed=0))


def test_background_collection(tmp_path, world):
    manifest = generate_background_collection(world, 5, seed=2, out_root=tmp_path)
    assert all(rec.object_count == 0 for rec in manifest.records)
    assert all(manifest.oracle_boxes(i) == [] for i in range(5))


def test_scene_oracle_matches_render(world):
    spec = make_spec(world, [Pose(0.7, -0.5, 6.0), Pose(4.0, 0.6, 5.0)])
    _, rendered = render_scene(spec, world.target, world)
    direct = scene_oracle_boxes(spec, world.target, world)
    assert [b.as_tuple() for b in rendered] == [b.as_tuple() for b in direct]
