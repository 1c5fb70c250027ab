import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pvda.config import ConfigError, ToyConfig
from pvda.dataset import (
    Dataset,
    DatasetError,
    LoadReport,
    Split,
    View,
    generate_toy_dataset,
    load_university1652,
    sample_batch,
    sample_batch_indices,
    write_university1652_tree,
)
from pvda.probe import pixel_means, view_probe_accuracy


@pytest.fixture(scope="module")
def toy_tree(tmp_path_factory, toy_small):
    root = tmp_path_factory.mktemp("u1652")
    write_university1652_tree(root, *toy_small)
    return root


def test_toy_layout(toy_small):
    train, query, gallery = toy_small
    assert train.num_locations == 6
    assert set(train.labels.tolist()) == set(range(6))
    assert set(query.labels.tolist()) == {6, 7, 8}
    assert set(gallery.labels.tolist()) == set(range(6, 11))
    assert all(s.view == View.UAV for s in query.samples)
    assert all(s.view == View.SATELLITE for s in gallery.samples)
    assert Counter(train.views.tolist()) == {View.UAV: 18, View.SATELLITE: 6}
    assert train.images().shape == (24, 3, 32, 32)


def test_toy_generation_is_deterministic():
    a = generate_toy_dataset(ToyConfig(num_locations=4, seed=3, uav_jitter=2))
    b = generate_toy_dataset(ToyConfig(num_locations=4, seed=3, uav_jitter=2))
    for da, db in zip(a, b):
        assert torch.equal(da.images(), db.images())
        assert np.array_equal(da.labels, db.labels)


def test_zero_shift_views_differ_only_by_noise():
    cfg = ToyConfig(num_locations=20, uav_per_location=8, image_size=32, view_shift_strength=0, seed=1)
    train, _, _ = generate_toy_dataset(cfg)
    means = pixel_means(train)
    gap = np.abs(means[train.views == 0].mean(0) - means[train.views == 1].mean(0))
    assert gap.max() < cfg.noise_std
    for loc in range(3):
        sat = train.images([i for i, s in enumerate(train.samples) if s.location_id == loc and s.view == View.SATELLITE])
        uav = train.images([i for i, s in enumerate(train.samples) if s.location_id == loc and s.view == View.UAV])
        assert (uav - sat).std().item() < 2 * cfg.noise_std


def test_unit_shift_is_linearly_separable_from_pixel_means():
    cfg = ToyConfig(num_locations=20, uav_per_location=8, image_size=32, view_shift_strength=1, seed=1)
    train, query, gallery = generate_toy_dataset(cfg)
    held = Dataset(query.samples + gallery.samples, query.num_locations, Split.QUERY)
    acc = view_probe_accuracy(pixel_means(train), train.views, pixel_means(held), held.views)
    assert acc > 0.9


def test_toy_config_validation():
    with pytest.raises(ConfigError):
        generate_toy_dataset(ToyConfig(num_locations=1))
    with pytest.raises(ConfigError):
        generate_toy_dataset(ToyConfig(uav_per_location=0))


def test_batch_is_view_balanced(toy_small):
    train = toy_small[0]
    batch = sample_batch(train, 8, np.random.default_rng(7))
    assert Counter(int(s.view) for s in batch) == {0: 4, 1: 4}


def test_batch_sampling_is_deterministic(toy_small):
    train = toy_small[0]
    a = sample_batch_indices(train, 8, np.random.default_rng(11))
    b = sample_batch_indices(train, 8, np.random.default_rng(11))
    assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_every_batch_has_both_views(toy_small, size, seed):
    views = toy_small[0].views[sample_batch_indices(toy_small[0], size, np.random.default_rng(seed))]
    assert (views == 0).any() and (views == 1).any()
    assert abs(int((views == 0).sum()) - int((views == 1).sum())) <= 1


def test_batch_errors(toy_small):
    train = toy_small[0]
    with pytest.raises(ConfigError):
        sample_batch(train, 1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_batch(train.of_view(View.UAV), 4, np.random.default_rng(0))


def test_loader_roundtrip(toy_tree, toy_small):
    train, query, gallery = toy_small
    report = LoadReport()
    loaded = load_university1652(toy_tree, "train", 32, report)
    assert loaded.num_locations == 6
    assert len(loaded) == len(train)
    assert Counter(loaded.views.tolist()) == Counter(train.views.tolist())
    q = load_university1652(toy_tree, "query_drone", 32, report)
    g = load_university1652(toy_tree, "gallery_satellite", 32, report)
    assert all(s.view == View.UAV for s in q.samples)
    assert all(s.view == View.SATELLITE for s in g.samples)
    assert len(g) == len(gallery) and len(q) == len(query)
    # ids agree across test subtrees; distractor ids never appear among queries
    assert set(q.labels.tolist()) < set(g.labels.tolist())
    assert report.counts["gallery_satellite"] == {"SATELLITE": len(gallery)}
    # PNG quantisation is the only loss
    assert (loaded.images() - torch.stack([s.pixels for s in sorted(
        train.samples, key=lambda s: (int(s.view), s.location_id))])).abs().max() < 0.5 / 255 + 1e-6


def test_loader_transposed_roles(toy_tree):
    qs = load_university1652(toy_tree, "query_satellite", 32)
    gd = load_university1652(toy_tree, "gallery_drone", 32)
    assert all(s.view == View.SATELLITE for s in qs.samples)
    assert set(qs.labels.tolist()) == set(gd.labels.tolist())


def test_loader_is_deterministic(toy_tree):
    a = load_university1652(toy_tree, "train", 32)
    b = load_university1652(toy_tree, "train", 32)
    assert a.labels.tolist() == b.labels.tolist()
    assert [s.source_path for s in a.samples] == [s.source_path for s in b.samples]


def test_loader_errors(tmp_path, toy_tree):
    with pytest.raises(DatasetError):
        load_university1652(tmp_path / "nope", "train")
    (tmp_path / "train" / "drone" / "0001").mkdir(parents=True)
    (tmp_path / "train" / "satellite").mkdir(parents=True)
    with pytest.raises(DatasetError, match="0001"):
        load_university1652(tmp_path, "train")
    with pytest.raises(DatasetError):
        load_university1652(toy_tree, "street")


def test_loader_skips_unreadable(tmp_path, toy_small):
    write_university1652_tree(tmp_path, *toy_small)
    bad = tmp_path / "train" / "drone" / "0000" / "zzz.jpg"
    bad.write_bytes(b"not an image")
    report = LoadReport()
    ds = load_university1652(tmp_path, "train", 32, report)
    assert str(bad) in report.skipped
    assert len(ds) == len(toy_small[0])
    report.write(tmp_path / "report.json")
    assert json.loads((tmp_path / "report.json").read_text())["skipped"] == [str(bad)]


def test_loader_resizes(toy_tree):
    ds = load_university1652(toy_tree, "gallery_satellite", 16)
    assert ds.images([0]).shape == (1, 3, 16, 16)


def test_dataset_rejects_bad_ids(toy_small):
    s = replace(toy_small[0].samples[0], location_id=99)
    with pytest.raises(DatasetError):
        Dataset([s], 6, Split.TRAIN)
