import numpy as np
import pytest
from PIL import Image
from pydantic import ValidationError

import dataset_processor
from dataset_processor import (
    ClassDataset,
    Sample,
    generate_synthetic,
    load_manifest,
    read_graymap,
    read_heatmap,
    render_heatmap,
    write_graymap,
    write_heatmap,
)
from errors import DatasetError, NumericalError
from models import DatasetManifest, ManifestEntry, SynthSpec
from relevance import Heatmap


def _spec(kind, **overrides):
    values = dict(kind=kind, image_size=(16, 16), n_train=10, n_val=4, n_val_outliers=2, n_test=8, seed=3)
    values.update(overrides)
    return SynthSpec(**values)


def _outliers(dataset):
    return [s for s in dataset.test + dataset.val_outliers if s.label == 1]


class TestSyntheticGeneration:
    """Test the synthetic anomaly classes"""

    def test_same_spec_same_bytes(self, tmp_path, small_stripe_spec):
        first, second = tmp_path / "a", tmp_path / "b"
        generate_synthetic(small_stripe_spec, first)
        generate_synthetic(small_stripe_spec, second)
        files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
        for name in files:
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_seeds_differ(self, small_stripe_spec):
        _, a = generate_synthetic(small_stripe_spec)
        _, b = generate_synthetic(small_stripe_spec.model_copy(update={"seed": 8}))
        assert not np.array_equal(a.train[0].image, b.train[0].image)

    def test_split_sizes_and_ids(self, small_stripe):
        assert len(small_stripe.train) == 20
        assert len(small_stripe.val) == 6
        assert len(small_stripe.val_outliers) == 4
        labels = [s.label for s in small_stripe.test]
        assert labels == [0] * 5 + [1] * 5
        assert small_stripe.train[0].sample_id == "train_0000"
        assert small_stripe.val_outliers[0].sample_id == "valout_0000"
        assert small_stripe.test[5].sample_id == "test_0005"

    def test_inliers_stay_in_base_range(self, small_stripe):
        for sample in small_stripe.train:
            assert sample.image.min() >= 60 / 255
            assert sample.image.max() <= 200 / 255

    def test_brightness_mask_covers_image(self):
        _, dataset = generate_synthetic(_spec("brightness"))
        for sample in _outliers(dataset):
            assert sample.mask.all()

    def test_stripe_mask(self):
        _, dataset = generate_synthetic(_spec("stripe", stripe_width=2))
        for sample in _outliers(dataset):
            assert sample.mask.sum() == 32
            assert sample.mask[:2].all()
            assert np.all(sample.image[:2] == 1.0)

    def test_masks_mark_changed_pixels(self):
        """Corruptions paint 255 while inlier intensities stay below it"""
        for kind in ("stripe", "dotted_line", "spatter_noise"):
            _, dataset = generate_synthetic(_spec(kind))
            for sample in _outliers(dataset):
                assert sample.mask.any()
                assert np.array_equal(sample.mask.astype(bool), sample.image == 1.0)

    def test_dotted_line_is_sparse(self):
        _, dataset = generate_synthetic(_spec("dotted_line", dot_count=5))
        for sample in _outliers(dataset):
            assert 1 <= sample.mask.sum() <= 5

    def test_cartoon_moments(self):
        spec = SynthSpec(kind="cartoon2d", n_train=2000, n_val=5, n_val_outliers=2, n_test=10, seed=11)
        _, dataset = generate_synthetic(spec)
        points = dataset.train_matrix()
        assert points.shape == (2000, 2)
        standard_error = spec.cartoon_std / np.sqrt(len(points))
        assert np.all(np.abs(points.mean(axis=0) - 0.6) <= 3 * standard_error)

    def test_cartoon_outliers_move_one_axis(self):
        spec = SynthSpec(kind="cartoon2d", n_train=10, n_val=2, n_val_outliers=4, n_test=10, seed=1)
        _, dataset = generate_synthetic(spec)
        assert dataset.image_shape == (1, 2)
        axes = [int(np.flatnonzero(s.mask.reshape(-1))[0]) for s in dataset.val_outliers]
        assert axes == [0, 1, 0, 1]
        assert all(s.mask.sum() == 1 for s in _outliers(dataset))

    def test_unchanged_corruption_is_fatal(self, monkeypatch):
        monkeypatch.setitem(dataset_processor.CORRUPTIONS, "stripe", lambda spec, rng, base: base.copy())
        with pytest.raises(DatasetError):
            generate_synthetic(_spec("stripe"))

    def test_stripe_wider_than_image(self):
        with pytest.raises(ValidationError):
            _spec("stripe", image_size=(4, 4), stripe_width=5)


class TestManifests:
    """Test manifest loading"""

    def test_round_trip(self, stripe_dir, small_stripe):
        loaded = load_manifest(stripe_dir)
        assert loaded.class_name == "stripe"
        for name, samples in small_stripe.splits().items():
            reloaded = loaded.splits()[name]
            assert [s.sample_id for s in reloaded] == [s.sample_id for s in samples]
            for a, b in zip(samples, reloaded):
                assert np.array_equal(a.image, b.image)
                assert a.label == b.label
                assert (a.mask is None and b.mask is None) or np.array_equal(a.mask, b.mask)

    def _write(self, root, test_labels, pixel=255):
        (root / "images").mkdir(parents=True)
        entries = []
        for i, label in enumerate(test_labels):
            write_graymap(root / "images" / f"t{i}.pgm", np.full((2, 2), pixel, dtype=np.uint8))
            entries.append(ManifestEntry(image=f"images/t{i}.pgm", label=label))
        write_graymap(root / "images" / "train.pgm", np.full((2, 2), 10, dtype=np.uint8))
        manifest = DatasetManifest(class_name="hand", train=[ManifestEntry(image="images/train.pgm", label=0)],
                                   test=entries)
        (root / "manifest.json").write_text(manifest.model_dump_json(by_alias=True))
        return root

    def test_full_intensity_loads_as_one(self, tmp_path):
        dataset = load_manifest(self._write(tmp_path, [0, 1]))
        assert np.all(dataset.test[0].image == 1.0)
        assert np.all(dataset.train[0].image == 10 / 255)

    def test_missing_test_outliers(self, tmp_path):
        with pytest.raises(DatasetError, match="test split requires outliers"):
            load_manifest(self._write(tmp_path, [0, 0]))

    def test_missing_image(self, tmp_path):
        root = self._write(tmp_path, [0, 1])
        (root / "images" / "t1.pgm").unlink()
        with pytest.raises(DatasetError, match="t1"):
            load_manifest(root)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_manifest(tmp_path)

    def test_color_image_rejected(self, tmp_path):
        path = tmp_path / "color.ppm"
        Image.new("RGB", (2, 2)).save(path, format="PPM")
        with pytest.raises(DatasetError):
            read_graymap(path)

    def test_graymap_round_trip(self, tmp_path, rng):
        pixels = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
        write_graymap(tmp_path / "g.pgm", pixels)
        assert np.array_equal(read_graymap(tmp_path / "g.pgm"), pixels)


class TestClassDataset:
    """Test split validation"""

    @staticmethod
    def _sample(label, mask=None):
        return Sample(image=np.zeros((2, 2)), label=label, mask=mask)

    def test_train_must_be_inliers(self):
        with pytest.raises(DatasetError):
            ClassDataset("c", train=[self._sample(1)], test=[self._sample(0), self._sample(1)])

    def test_test_needs_inliers(self):
        with pytest.raises(DatasetError, match="test split requires inliers"):
            ClassDataset("c", train=[self._sample(0)], test=[self._sample(1)])

    def test_empty_train(self):
        with pytest.raises(DatasetError):
            ClassDataset("c", train=[], test=[self._sample(0), self._sample(1)])

    def test_sample_checks(self):
        with pytest.raises(DatasetError):
            Sample(image=np.full((2, 2), 1.5), label=0)
        with pytest.raises(DatasetError):
            Sample(image=np.zeros((2, 2)), label=1, mask=np.ones((3, 3), dtype=np.uint8))

    def test_validation_falls_back_to_train(self):
        dataset = ClassDataset("c", train=[self._sample(0)], test=[self._sample(0), self._sample(1)])
        assert np.array_equal(dataset.validation_matrix(), dataset.train_matrix())


class TestHeatmapFiles:
    """Test heatmap rendering and sidecars"""

    def test_zero_heatmap_renders_black(self):
        assert np.array_equal(render_heatmap(np.zeros((3, 3))), np.zeros((3, 3), dtype=np.uint8))

    def test_peak_renders_white(self):
        assert np.array_equal(render_heatmap(np.array([[0.0, 0.3]])), [[0, 255]])

    def test_negative_values_render_black(self):
        assert np.array_equal(render_heatmap(np.array([[-2.0, 1.0]])), [[0, 255]])

    def test_sidecar_round_trip(self, tmp_path, rng):
        values = rng.normal(size=(4, 6))
        paths = write_heatmap(Heatmap(values=values), tmp_path / "h")
        assert [p.name for p in paths] == ["h.hm", "h.pgm"]
        assert np.array_equal(read_heatmap(paths[0]), values.astype(np.float32))
        assert paths[0].read_bytes().startswith(b"HM1 4 6\n")
        assert read_graymap(paths[1]).shape == (4, 6)

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(NumericalError):
            write_heatmap(np.array([[np.nan, 1.0]]), tmp_path / "h")

    def test_bad_sidecar(self, tmp_path):
        path = tmp_path / "bad.hm"
        path.write_bytes(b"HM1 2 2\n" + b"\x00" * 4)
        with pytest.raises(DatasetError):
            read_heatmap(path)
