import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mean_cvgl.backbone import View
from mean_cvgl.config import AugmentPolicy
from mean_cvgl.data import (
    DatasetIndex,
    FileStore,
    IndexingError,
    SyntheticSpec,
    augment,
    base_patterns,
    check_disjoint,
    generate_synthetic,
    hflip,
    load_layout,
    load_splits,
    sample_batch,
    stack_view,
)


def write_tree(root, split, classes, drone=2, satellite=1, extra_views=()):
    for c in classes:
        for view, n in (("drone", drone), ("satellite", satellite)) + tuple((v, 1) for v in extra_views):
            d = root / split / view / c
            d.mkdir(parents=True, exist_ok=True)
            for j in range(n):
                Image.new("RGB", (8, 8), (j * 40, 10, 200)).save(d / f"{j}.png")


class TestLayout:
    def test_counts(self, tmp_path):
        write_tree(tmp_path, "train", ["a", "b", "c"])
        idx = load_layout(tmp_path, "train")
        assert idx.counts() == {"classes": 3, "drone": 6, "satellite": 3}
        assert [lab for _, lab in idx.items("satellite")] == [0, 1, 2]

    def test_missing_satellite(self, tmp_path):
        write_tree(tmp_path, "train", ["a", "b"])
        write_tree(tmp_path, "train", ["c"], satellite=0)
        with pytest.raises(IndexingError, match="satellite"):
            load_layout(tmp_path, "train")

    def test_street_view_ignored_with_notice(self, tmp_path):
        write_tree(tmp_path, "train", ["a"], extra_views=("street",))
        idx = load_layout(tmp_path, "train")
        assert idx.counts()["drone"] == 2
        assert any("street" in n for n in idx.notices)

    def test_missing_split(self, tmp_path):
        with pytest.raises(IndexingError):
            load_layout(tmp_path, "train")

    def test_disjoint_splits(self, tmp_path):
        write_tree(tmp_path, "train", ["a", "b"])
        write_tree(tmp_path, "test", ["c"])
        assert set(load_splits(tmp_path)) == {"train", "test"}
        write_tree(tmp_path, "test", ["a"])
        with pytest.raises(IndexingError, match="share"):
            load_splits(tmp_path)

    def test_check_disjoint_direct(self):
        a = DatasetIndex("train", ["x"], {"x": ["1"]}, {"x": ["2"]})
        b = DatasetIndex("test", ["x"], {"x": ["3"]}, {})
        with pytest.raises(IndexingError):
            check_disjoint(a, b)

    def test_file_store_resizes(self, tmp_path):
        write_tree(tmp_path, "train", ["a"])
        idx = load_layout(tmp_path, "train")
        batch = stack_view(idx, FileStore(16), "drone")
        assert batch.pixels.shape == (2, 3, 16, 16) and batch.pixels.dtype == torch.float32
        assert 0.0 <= float(batch.pixels.min()) and float(batch.pixels.max()) <= 1.0


class TestSynthetic:
    def test_image_count(self, synthetic8):
        assert synthetic8.num_images == 40
        assert synthetic8.train.counts() == {"classes": 8, "drone": 32, "satellite": 8}

    def test_same_seed_is_byte_identical(self):
        spec = SyntheticSpec(num_classes=3, drone_per_class=2, resolution=32, seed=7)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert a.store.images.keys() == b.store.images.keys()
        assert all(np.array_equal(a.store.images[k], b.store.images[k]) for k in a.store.images)

    def test_different_seed_differs(self):
        a = generate_synthetic(SyntheticSpec(num_classes=2, drone_per_class=1, resolution=32, seed=1))
        b = generate_synthetic(SyntheticSpec(num_classes=2, drone_per_class=1, resolution=32, seed=2))
        k = "train/satellite/0000/000.png"
        assert not np.array_equal(a.store.images[k], b.store.images[k])

    def test_class_patterns_are_weakly_correlated(self):
        # sample correlation of two independent classes over 100 seeds
        corrs = []
        for seed in range(100):
            b = base_patterns(SyntheticSpec(num_classes=2, seed=seed))
            corrs.append(np.corrcoef(b[0].ravel(), b[1].ravel())[0, 1])
        assert np.mean(np.abs(corrs) < 0.5) >= 0.95

    def test_test_split_is_disjoint(self):
        ds = generate_synthetic(SyntheticSpec(num_classes=3, drone_per_class=1, resolution=32, test_classes=2))
        check_disjoint(ds.train, ds.splits["test"])
        assert len(ds.splits["test"].classes) == 2

    def test_written_files_reload(self, tmp_path):
        spec = SyntheticSpec(num_classes=2, drone_per_class=2, resolution=32, seed=3)
        ds = generate_synthetic(spec, tmp_path)
        assert (tmp_path / "manifest.json").exists()
        idx = load_layout(tmp_path, "train")
        assert idx.counts() == ds.train.counts()
        key = idx.items("drone")[0][0]
        assert np.allclose(FileStore(32).load(key), ds.store.load(key))


class TestSampling:
    def test_rows_are_class_aligned(self, synthetic8):
        d, s = sample_batch(synthetic8.train, synthetic8.store, 5, np.random.default_rng(0))
        assert d.view is View.DRONE and s.view is View.SATELLITE
        assert torch.equal(d.labels, s.labels)
        assert len(set(d.labels.tolist())) == 5
        assert d.pixels.shape == (5, 3, 64, 64)

    def test_too_many_classes(self, synthetic8):
        with pytest.raises(ValueError):
            sample_batch(synthetic8.train, synthetic8.store, 9, np.random.default_rng(0))

    def test_rng_reproducible(self, synthetic8):
        a = sample_batch(synthetic8.train, synthetic8.store, 4, np.random.default_rng(3))
        b = sample_batch(synthetic8.train, synthetic8.store, 4, np.random.default_rng(3))
        assert torch.equal(a[0].pixels, b[0].pixels) and torch.equal(a[1].labels, b[1].labels)


class TestAugment:
    def test_identity_policy(self):
        x = torch.rand(2, 3, 16, 16)
        assert torch.equal(augment(x, AugmentPolicy.identity(), torch.Generator()), x)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(4, 24))
    def test_flip_involution(self, b, size):
        x = torch.rand(b, 3, size, size)
        assert torch.equal(hflip(hflip(x)), x)

    def test_forced_flip_matches_hflip(self):
        policy = AugmentPolicy(crop=False, hflip=True, rotate=False)
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        outs = [augment(x, policy, torch.Generator().manual_seed(s)) for s in range(8)]
        assert any(torch.allclose(o, hflip(x), atol=1e-10) for o in outs)
        assert any(torch.allclose(o, x, atol=1e-10) for o in outs)

    @pytest.mark.parametrize("size", [32, 48])
    def test_crop_output_resolution(self, size):
        out = augment(torch.rand(3, 3, 64, 64), AugmentPolicy(), torch.Generator().manual_seed(0), size)
        assert out.shape == (3, 3, size, size)

    def test_same_generator_same_output(self):
        x = torch.rand(2, 3, 16, 16)
        a = augment(x, AugmentPolicy(), torch.Generator().manual_seed(5))
        b = augment(x, AugmentPolicy(), torch.Generator().manual_seed(5))
        assert torch.equal(a, b)
