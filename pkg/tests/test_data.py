import numpy as np
import pytest
from fractions import Fraction
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from regionseg.common import IGNORE_LABEL, ConfigurationError
from regionseg.data import (AugmentationConfig, Sample, augment,
                            build_synthetic_dataset, generate_synthetic_scene,
                            load_dataset, load_partition, make_partition,
                            save_dataset, save_partition)


class TestSyntheticScene:
    def test_basic_contract(self):
        s = generate_synthetic_scene(0, (64, 64), 3)
        assert s.image.shape == (64, 64, 3)
        assert s.label.shape == (64, 64)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert set(np.unique(s.label)) <= {0, 1, 2}

    def test_deterministic(self):
        a = generate_synthetic_scene(123, (64, 64), 4)
        b = generate_synthetic_scene(123, (64, 64), 4)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.label.tobytes() == b.label.tobytes()
        assert a.id == b.id

    def test_two_class_scene_has_foreground(self):
        # oracle: enumerate the label histogram
        s = generate_synthetic_scene(1, (64, 64), 2)
        hist = np.bincount(s.label.reshape(-1), minlength=2)
        assert set(np.unique(s.label)) <= {0, 1}
        assert hist[1] > 0

    def test_different_seeds_differ(self):
        a = generate_synthetic_scene(0, (64, 64), 3)
        b = generate_synthetic_scene(1, (64, 64), 3)
        assert not np.array_equal(a.image, b.image)

    def test_invalid_args_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic_scene(0, (64, 64), 1)
        with pytest.raises(ConfigurationError):
            generate_synthetic_scene(0, (8, 64), 3)

    @given(seed=st.integers(0, 10_000), c=st.integers(2, 6))
    @settings(max_examples=25, deadline=None)
    def test_labels_always_in_range(self, seed, c):
        s = generate_synthetic_scene(seed, (32, 32), c)
        values = set(np.unique(s.label))
        assert values <= set(range(c))


class TestDatasetIO:
    def _write_pairs(self, root, n=3, size=(20, 20)):
        samples = [
            Sample(image=np.random.default_rng(i).random((*size, 3)).astype(np.float32),
                   label=np.full(size, i % 3, dtype=np.int64),
                   id=f"img{i:02d}")
            for i in range(n)
        ]
        save_dataset(samples, root)
        return samples

    def test_roundtrip_sorted(self, tmp_path):
        self._write_pairs(tmp_path, 3)
        loaded = load_dataset(tmp_path)
        assert [s.id for s in loaded] == ["img00", "img01", "img02"]
        assert loaded[0].image.shape == (20, 20, 3)

    def test_ignore_value_passthrough(self, tmp_path):
        label = np.zeros((16, 16), dtype=np.int64)
        label[0, :] = IGNORE_LABEL
        save_dataset([Sample(np.zeros((16, 16, 3), np.float32), label, "a")], tmp_path)
        loaded = load_dataset(tmp_path)
        assert (loaded[0].label[0] == IGNORE_LABEL).all()

    def test_missing_mask_names_id(self, tmp_path):
        self._write_pairs(tmp_path, 2)
        (tmp_path / "masks" / "img01.png").unlink()
        with pytest.raises(ConfigurationError, match="img01"):
            load_dataset(tmp_path)

    def test_mask_value_out_of_range_lists_ids(self, tmp_path):
        # oracle: a 1-pixel mask with value exactly C must be rejected
        (tmp_path / "images").mkdir(parents=True)
        (tmp_path / "masks").mkdir()
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "images" / "bad.png")
        mask = np.zeros((16, 16), np.uint8)
        mask[0, 0] = 3
        Image.fromarray(mask, mode="L").save(tmp_path / "masks" / "bad.png")
        with pytest.raises(ConfigurationError, match="bad"):
            load_dataset(tmp_path, num_classes=3)
        # value 255 stays legal
        assert len(load_dataset(tmp_path, num_classes=4)) == 1

    def test_non_integer_mask_rejected(self, tmp_path):
        (tmp_path / "images").mkdir(parents=True)
        (tmp_path / "masks").mkdir()
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "images" / "x.png")
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "masks" / "x.png")
        with pytest.raises(ConfigurationError, match="single-channel"):
            load_dataset(tmp_path)


class TestPartition:
    def test_floor_counts(self):
        ids = [f"i{k}" for k in range(16)]
        assert len(make_partition(ids, Fraction(1, 16), 0).labeled_ids) == 1
        p = make_partition(ids, Fraction(1, 2), 0)
        assert len(p.labeled_ids) == 8 and len(p.unlabeled_ids) == 8

    def test_minimum_one_labeled(self):
        p = make_partition(["a", "b", "c"], Fraction(1, 16), 0)
        assert len(p.labeled_ids) == 1

    def test_deterministic(self):
        ids = [f"i{k}" for k in range(33)]
        a = make_partition(ids, Fraction(1, 4), 99)
        b = make_partition(ids, Fraction(1, 4), 99)
        assert a == b

    def test_bad_ratio_rejected(self):
        with pytest.raises(ConfigurationError):
            make_partition(["a", "b"], Fraction(1, 3), 0)
        with pytest.raises(ConfigurationError):
            make_partition([], Fraction(1, 2), 0)

    @given(n=st.integers(1, 200), seed=st.integers(0, 2**31 - 1),
           ratio=st.sampled_from([Fraction(1, 16), Fraction(1, 8),
                                  Fraction(1, 4), Fraction(1, 2)]))
    @settings(max_examples=60, deadline=None)
    def test_disjoint_exhaustive(self, n, seed, ratio):
        ids = [f"id{k}" for k in range(n)]
        p = make_partition(ids, ratio, seed)
        labeled, unlabeled = set(p.labeled_ids), set(p.unlabeled_ids)
        assert labeled.isdisjoint(unlabeled)
        assert labeled | unlabeled == set(ids)
        assert len(p.labeled_ids) == max(1, int(n * ratio))

    def test_file_roundtrip(self, tmp_path):
        p = make_partition([f"i{k}" for k in range(16)], Fraction(1, 8), 5)
        path = tmp_path / "part.txt"
        save_partition(p, path)
        text = path.read_text()
        assert text.startswith("#ratio=1/8 seed=5\n")
        assert load_partition(path) == p


class TestAugment:
    def _sample(self, h=8, w=8):
        rng = np.random.default_rng(0)
        image = rng.random((h, w, 3)).astype(np.float32)
        label = rng.integers(0, 3, size=(h, w)).astype(np.int64)
        return Sample(image, label, "s")

    def test_identity_config(self):
        s = self._sample()
        cfg = AugmentationConfig(crop_size=(8, 8), hflip_prob=0.0, scale_range=(1.0, 1.0))
        out = augment(s, cfg, np.random.default_rng(0))
        assert np.array_equal(out.image, s.image)
        assert np.array_equal(out.label, s.label)

    def test_hflip_consistency(self):
        s = self._sample()
        cfg = AugmentationConfig(crop_size=(8, 8), hflip_prob=1.0, scale_range=(1.0, 1.0))
        out = augment(s, cfg, np.random.default_rng(0))
        assert np.array_equal(out.image, s.image[:, ::-1])
        assert np.array_equal(out.label, s.label[:, ::-1])

    def test_downscale_padding_is_ignore(self):
        # oracle: 2x downscale of an 8x8 sample then an 8x8 crop must pad the
        # corners with IGNORE
        s = self._sample(8, 8)
        cfg = AugmentationConfig(crop_size=(8, 8), hflip_prob=0.0, scale_range=(0.5, 0.5))
        out = augment(s, cfg, np.random.default_rng(0))
        assert out.label.shape == (8, 8)
        for y, x in [(0, 0), (0, 7), (7, 0), (7, 7)]:
            assert out.label[y, x] == IGNORE_LABEL
        assert (out.label[2:6, 2:6] != IGNORE_LABEL).all()
        # image padding is zero
        assert out.image[0, 0].sum() == 0.0

    def test_upscale_keeps_block_alignment(self):
        # constant-color quadrants: after 2x upscale + crop, every pixel's
        # label must match the quadrant of its image color
        image = np.zeros((8, 8, 3), dtype=np.float32)
        label = np.zeros((8, 8), dtype=np.int64)
        image[:4, :4] = 0.25
        image[4:, 4:] = 0.75
        label[:4, :4] = 1
        label[4:, 4:] = 2
        s = Sample(image, label, "q")
        cfg = AugmentationConfig(crop_size=(8, 8), hflip_prob=0.0, scale_range=(2.0, 2.0))
        out = augment(s, cfg, np.random.default_rng(3))
        interior = (out.image[..., 0] > 0.7)
        assert (out.label[interior] == 2).all()

    def test_crop_determinism(self):
        s = self._sample(16, 16)
        cfg = AugmentationConfig(crop_size=(8, 8), hflip_prob=0.5, scale_range=(0.8, 1.2))
        a = augment(s, cfg, np.random.default_rng(7))
        b = augment(s, cfg, np.random.default_rng(7))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.label, b.label)

    def test_invalid_config(self):
        s = self._sample()
        with pytest.raises(ConfigurationError):
            augment(s, AugmentationConfig(scale_range=(2.0, 1.0)),
                    np.random.default_rng(0))


def test_build_synthetic_dataset_ids_and_determinism():
    a = build_synthetic_dataset(5, (32, 32), 3, seed=4, prefix="train")
    b = build_synthetic_dataset(5, (32, 32), 3, seed=4, prefix="train")
    assert [s.id for s in a] == [f"train-{i:05d}" for i in range(5)]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    # different prefix gives different scenes
    c = build_synthetic_dataset(5, (32, 32), 3, seed=4, prefix="val")
    assert not np.array_equal(a[0].image, c[0].image)
