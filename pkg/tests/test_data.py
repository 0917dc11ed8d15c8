import os
import tempfile
import unittest

import numpy

from bimamba import data
from bimamba._exceptions import ContractError, ShapeError
from bimamba.data import (
    AugmentParams,
    LabeledSample,
    ProjectionAxis,
    SplitManifest,
    SynthConfig,
)

SMALL = SynthConfig(height=32, width=32)


def gradient_sample(size: int = 16) -> LabeledSample:
    rows, cols = numpy.mgrid[0:size, 0:size] / (size - 1)
    frontal = (0.25 * rows + 0.5 * cols).astype(numpy.float32)
    lateral = (0.5 * rows + 0.25 * cols).astype(numpy.float32)
    return LabeledSample(frontal, lateral, 1, "s00000")


class TestProjection(unittest.TestCase):
    def test_uniform_volume_gives_constant_images(self):
        volume = numpy.full((4, 5, 6), 3.0)
        frontal = data.parallel_project(volume, ProjectionAxis.FRONTAL)
        lateral = data.parallel_project(volume, "lateral")
        self.assertEqual(frontal.shape, (4, 6))
        self.assertEqual(lateral.shape, (4, 5))
        numpy.testing.assert_array_equal(frontal, 0.5)
        numpy.testing.assert_array_equal(lateral, 0.5)

    def test_impulse_lands_at_projected_coordinates(self):
        volume = numpy.zeros((5, 6, 7))
        volume[1, 2, 3] = 1.0
        frontal = data.parallel_project(volume, "frontal")
        lateral = data.parallel_project(volume, "lateral")
        self.assertEqual(numpy.argwhere(frontal == 1.0).tolist(), [[1, 3]])
        self.assertEqual(numpy.argwhere(lateral == 1.0).tolist(), [[1, 2]])
        self.assertEqual(int((frontal > 0).sum()), 1)
        self.assertEqual(int((lateral > 0).sum()), 1)

    def test_line_integral_is_axis_mean(self):
        volume = numpy.random.default_rng(0).random((3, 4, 5))
        numpy.testing.assert_allclose(
            data.line_integral(volume, "frontal"), volume.mean(axis=1)
        )
        numpy.testing.assert_allclose(
            data.line_integral(volume, "lateral"), volume.mean(axis=2)
        )

    def test_errors(self):
        with self.assertRaises(ShapeError):
            data.line_integral(numpy.zeros((3, 4)), "frontal")
        with self.assertRaises(ValueError):
            ProjectionAxis.parse("axial")


class TestSynthesis(unittest.TestCase):
    def test_deterministic_per_seed(self):
        a, manifest_a = data.synth_dataset(3, 12, SMALL)
        b, manifest_b = data.synth_dataset(3, 12, SMALL)
        c, _ = data.synth_dataset(4, 12, SMALL)
        self.assertEqual(manifest_a, manifest_b)
        for x, y in zip(a, b):
            self.assertEqual(x.subject_id, y.subject_id)
            self.assertEqual(x.label, y.label)
            numpy.testing.assert_array_equal(x.frontal, y.frontal)
            numpy.testing.assert_array_equal(x.lateral, y.lateral)
        self.assertFalse(numpy.array_equal(a[0].frontal, c[0].frontal))

    def test_split_counts_and_balance(self):
        samples, manifest = data.synth_dataset(1, 100, SMALL)
        self.assertEqual(len(samples), 100)
        self.assertEqual(sum(s.label for s in samples), 30)
        self.assertEqual(
            (len(manifest.train), len(manifest.val), len(manifest.test)),
            (70, 10, 20),
        )
        for split, positives in (("train", 21), ("val", 3), ("test", 6)):
            with self.subTest(msg=split):
                selected = manifest.select(samples, split)
                self.assertEqual(sum(s.label for s in selected), positives)
        ids = manifest.train + manifest.val + manifest.test
        self.assertEqual(len(set(ids)), 100)

    def test_small_datasets_put_both_labels_in_every_split(self):
        for n in range(data.MIN_SUBJECTS, 40):
            samples, manifest = data.synth_dataset(n, n, SMALL)
            for split in ("train", "val", "test"):
                labels = {s.label for s in manifest.select(samples, split)}
                with self.subTest(n=n, split=split):
                    self.assertEqual(labels, {0, 1})

    def test_split_shares_use_floor(self):
        samples = [
            data.LabeledSample(None, None, int(i < 5), f"s{i:02d}")
            for i in range(20)
        ]
        manifest = data.stratified_split(samples, 0, (0.7, 0.1, 0.2))
        # 15 negatives: floor(1.5) val, floor(3.0) test
        # 5 positives: at least one val, floor(1.0) test
        self.assertEqual(
            (len(manifest.train), len(manifest.val), len(manifest.test)),
            (14, 2, 4),
        )
        val_labels = [s.label for s in manifest.select(samples, "val")]
        self.assertEqual(sorted(val_labels), [0, 1])

    def test_images(self):
        samples, _ = data.synth_dataset(2, 10, SMALL)
        for sample in samples:
            for view in (sample.frontal, sample.lateral):
                self.assertEqual(view.shape, (32, 32))
                self.assertEqual(view.dtype, numpy.float32)
                self.assertGreaterEqual(float(view.min()), 0.0)
                self.assertLessEqual(float(view.max()), 1.0)

    def test_label_is_conjunction(self):
        for has_blob in (False, True):
            for rises in (False, True):
                sample = data.synth_subject(0, 0, has_blob, rises, SMALL)
                with self.subTest(msg=f"blob={has_blob}, rises={rises}"):
                    self.assertEqual(sample.label, int(has_blob and rises))

    def test_features_change_only_their_view(self):
        base = data.synth_subject(5, 7, False, False, SMALL)
        blob = data.synth_subject(5, 7, True, False, SMALL)
        ramp = data.synth_subject(5, 7, False, True, SMALL)
        numpy.testing.assert_array_equal(base.lateral, blob.lateral)
        numpy.testing.assert_array_equal(base.frontal, ramp.frontal)
        self.assertGreater(
            data.blob_contrast(blob.frontal, SMALL),
            data.blob_contrast(base.frontal, SMALL),
        )
        self.assertGreater(
            data.ramp_contrast(ramp.lateral), data.ramp_contrast(base.lateral)
        )

    def test_too_few_subjects(self):
        with self.assertRaises(ContractError):
            data.synth_dataset(1, 5, SMALL)

    def test_overlapping_splits_rejected(self):
        with self.assertRaises(ContractError):
            SplitManifest(["a", "b"], ["b"], ["c"])

    def test_calibration(self):
        samples, _ = data.synth_dataset(1, 200)
        report = data.calibration_report(samples)
        self.assertLess(report.frontal_mean_auroc, 0.75)
        self.assertLess(report.lateral_mean_auroc, 0.75)
        self.assertGreater(report.oracle_auroc, 0.95)


class TestAugmentation(unittest.TestCase):
    def test_identity_is_noop(self):
        sample = gradient_sample()
        out = data.apply_augment(sample, AugmentParams.identity(16, 16))
        self.assertIs(out, sample)

    def test_double_flip_is_noop(self):
        sample = gradient_sample()
        flip = AugmentParams(0, 0, 16, 16, True)
        once = data.apply_augment(sample, flip)
        self.assertFalse(numpy.array_equal(once.frontal, sample.frontal))
        twice = data.apply_augment(once, flip)
        numpy.testing.assert_array_equal(twice.frontal, sample.frontal)
        numpy.testing.assert_array_equal(twice.lateral, sample.lateral)

    def test_views_share_the_transform(self):
        sample = gradient_sample()
        out = data.apply_augment(sample, AugmentParams(2, 3, 10, 12, True))
        # Both views are linear in (row, col), so their difference is too;
        # a shared crop and flip keeps it a single plane.
        diff = out.lateral - out.frontal
        rows = numpy.diff(diff, axis=0)
        cols = numpy.diff(diff, axis=1)
        self.assertGreater(float(rows.min()), 0.0)
        self.assertGreater(float(cols.min()), 0.0)

    def test_sampled_params_in_range(self):
        rng = numpy.random.default_rng(0)
        flips = 0
        for _ in range(200):
            p = data.sample_augment(rng, 64, 64)
            self.assertGreaterEqual(p.top, 0)
            self.assertGreaterEqual(p.left, 0)
            self.assertLessEqual(p.top + p.height, 64)
            self.assertLessEqual(p.left + p.width, 64)
            self.assertGreaterEqual(p.height * p.width, 0.6 * 64 * 64)
            self.assertTrue(0.6 <= p.width / p.height <= 1.5)
            flips += p.flip
        self.assertTrue(60 < flips < 140)

    def test_clamped_crop_keeps_aspect_ratio(self):
        # Every draw is wider than the 48-pixel image
        ranges = dict(aspect_range=(2.0, 3.0), area_range=(0.9, 1.0))
        for seed in range(50):
            rng = numpy.random.default_rng(seed)
            rng.uniform(*ranges["area_range"])
            aspect = rng.uniform(*ranges["aspect_range"])
            p = data.sample_augment(
                numpy.random.default_rng(seed), 32, 48, **ranges
            )
            with self.subTest(seed=seed):
                self.assertEqual(p.width, 48)
                self.assertLessEqual(abs(p.height - 48 / aspect), 0.5 + 1e-9)

    def test_deterministic_and_label_safe(self):
        samples, _ = data.synth_dataset(6, 10, SMALL)
        for sample in samples:
            a = data.augment(sample, numpy.random.default_rng(1))
            b = data.augment(sample, numpy.random.default_rng(1))
            numpy.testing.assert_array_equal(a.frontal, b.frontal)
            numpy.testing.assert_array_equal(a.lateral, b.lateral)
            self.assertEqual(a.label, sample.label)
            self.assertEqual(a.subject_id, sample.subject_id)
            self.assertEqual(a.frontal.shape, sample.frontal.shape)

    def test_flip_keeps_ramp_direction(self):
        positive = data.synth_subject(8, 0, True, True, SMALL)
        flip = AugmentParams(0, 0, 32, 32, True)
        flipped = data.apply_augment(positive, flip)
        self.assertGreater(data.ramp_contrast(flipped.lateral), 0.0)
        self.assertAlmostEqual(
            data.ramp_contrast(flipped.lateral),
            data.ramp_contrast(positive.lateral),
            places=5,
        )

    def test_mismatched_views(self):
        sample = gradient_sample()._replace(lateral=numpy.zeros((8, 8)))
        with self.assertRaises(ShapeError):
            data.apply_augment(sample, AugmentParams(0, 0, 8, 8, True))


class TestDatasetFiles(unittest.TestCase):
    def test_round_trip(self):
        samples, manifest = data.synth_dataset(9, 10, SMALL)
        with tempfile.TemporaryDirectory() as tmp:
            data.save_dataset(tmp, samples, manifest)
            self.assertEqual(len(os.listdir(tmp)), 2 * len(samples) + 1)
            loaded, loaded_manifest = data.load_dataset(tmp)
        self.assertEqual(
            sorted(loaded_manifest.train), sorted(manifest.train)
        )
        self.assertEqual(sorted(loaded_manifest.test), sorted(manifest.test))
        by_id = {s.subject_id: s for s in loaded}
        for sample in samples:
            other = by_id[sample.subject_id]
            self.assertEqual(other.label, sample.label)
            numpy.testing.assert_allclose(
                other.frontal, sample.frontal, atol=1 / 65535
            )
            numpy.testing.assert_allclose(
                other.lateral, sample.lateral, atol=1 / 65535
            )

    def test_missing_image(self):
        samples, manifest = data.synth_dataset(9, 10, SMALL)
        with tempfile.TemporaryDirectory() as tmp:
            data.save_dataset(tmp, samples, manifest)
            name = f"{samples[0].subject_id}_lateral.pgm"
            os.remove(os.path.join(tmp, name))
            with self.assertRaises(OSError):
                data.load_dataset(tmp)
