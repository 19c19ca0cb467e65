import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from encoding.encoders import encode_keycentroid, encode_offsets
from encoding.targets import KeyCentroidField, OffsetField
from fields.core import DenseField
from scenes.generator import generate_scene

from .objectives import finite_diff_check, heatmap_bce, keycentroid_l1, offset_l1


def single_pair_target(dx, dy, shape=(1, 4, 4), at=(1, 2)):
    """A one-joint KeyCentroidField with a single valid pixel."""
    joints, height, width = shape
    base = np.zeros((2 * joints, height, width), dtype=np.float32)
    valid = np.zeros(shape, dtype=bool)
    y, x = at
    base[0, y, x], base[1, y, x] = dx, dy
    valid[0, y, x] = True
    return KeyCentroidField(DenseField(base), valid, DenseField(valid.astype(np.float32)), 32.0)


def signed_uniform(rng, low, high, shape):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def random_keycentroid_pair(seed, joints=2, size=16, magnitude=(0.0, 10.0)):
    rng = np.random.default_rng(seed)
    base = signed_uniform(rng, *magnitude, (2 * joints, size, size)).astype(np.float32)
    valid = rng.random((joints, size, size)) < 0.6
    base[np.repeat(~valid, 2, axis=0)] = 0.0
    target = KeyCentroidField(DenseField(base), valid, DenseField(valid.astype(np.float32)), 32.0)
    # keep every error well away from zero
    error = signed_uniform(rng, 0.5, 2.0, base.shape)
    return DenseField(base + error.astype(np.float32)), target


def random_offset_pair(seed, size=16, magnitude=(0.0, 10.0)):
    rng = np.random.default_rng(seed)
    foreground = rng.random((size, size)) < 0.6
    foreground[0, 0] = True
    data = signed_uniform(rng, *magnitude, (2, size, size)).astype(np.float32)
    data[:, ~foreground] = 0.0
    target = OffsetField(DenseField(data), foreground)
    error = signed_uniform(rng, 0.5, 2.0, data.shape).astype(np.float32)
    return OffsetField(DenseField(data + error), foreground), target


class HeatmapBCETests(SimpleTestCase):

    def test_exact_prediction(self):
        target = DenseField(np.eye(6)[np.newaxis])
        report = heatmap_bce(target, target)
        self.assertLessEqual(report.value, 1e-6)

    def test_half_probability(self):
        rng = np.random.default_rng(0)
        target = DenseField((rng.random((2, 8, 8)) < 0.5).astype(np.float32))
        report = heatmap_bce(DenseField(np.full((2, 8, 8), 0.5)), target)
        assert_allclose(report.value, math.log(2), rtol=1e-9)
        self.assertEqual(report.num_active, 128)

    def test_single_pixel(self):
        report = heatmap_bce(DenseField(np.full((1, 1, 1), 0.25)), DenseField(np.ones((1, 1, 1))))
        assert_allclose(report.value, -math.log(0.25), rtol=1e-7)

    def test_gradient_formula(self):
        pred = DenseField(np.full((1, 1, 2), 0.25))
        target = DenseField(np.array([[[1.0, 0.0]]]))
        report = heatmap_bce(pred, target)
        assert_allclose(report.gradient.data[0, 0], [(0.25 - 1) / (0.25 * 0.75) / 2, 0.25 / (0.25 * 0.75) / 2], rtol=1e-6)

    def test_excluded_pixels_do_not_contribute(self):
        rng = np.random.default_rng(1)
        target = DenseField((rng.random((1, 6, 6)) < 0.5).astype(np.float32))
        keep = np.ones((6, 6), dtype=bool)
        keep[:3] = False
        first = rng.uniform(0.1, 0.9, size=(1, 6, 6))
        second = first.copy()
        second[0, :3] = rng.permutation(second[0, :3].ravel()).reshape(3, 6)[::-1]
        a = heatmap_bce(DenseField(first), target, DenseField(keep))
        b = heatmap_bce(DenseField(second), target, DenseField(keep))
        self.assertEqual(a.value, b.value)
        self.assertEqual(a.num_active, 18)
        self.assertTrue((a.gradient.data[0, :3] == 0).all())

    def test_errors(self):
        with self.assertRaises(ValueError):
            heatmap_bce(DenseField.zeros(1, 2, 2), DenseField.zeros(1, 2, 3))
        with self.assertRaises(ValueError):
            heatmap_bce(DenseField.zeros(1, 2, 2), DenseField.zeros(1, 2, 2), DenseField.zeros(1, 2, 2))

    def test_gradient_matches_finite_differences(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            pred = DenseField(rng.uniform(0.05, 0.95, size=(1, 16, 16)))
            target = DenseField((rng.random((1, 16, 16)) < 0.3).astype(np.float32))
            self.assertLess(finite_diff_check(heatmap_bce, pred, target, eps=1e-4, rng_seed=seed), 1e-3)


class KeyCentroidL1Tests(SimpleTestCase):

    def test_exact_prediction(self):
        target = encode_keycentroid(generate_scene(1, (128, 128), 4), 16)
        self.assertEqual(keycentroid_l1(target.base, target).value, 0.0)

    def test_single_pair(self):
        target = single_pair_target(7, 6)
        report = keycentroid_l1(DenseField.zeros(2, 4, 4), target)
        self.assertEqual(report.value, 13.0)
        self.assertEqual(report.num_active, 1)

    def test_two_pairs(self):
        base = np.zeros((2, 4, 4), dtype=np.float32)
        valid = np.zeros((1, 4, 4), dtype=bool)
        valid[0, 0, 0] = valid[0, 3, 3] = True
        target = KeyCentroidField(DenseField(base), valid, DenseField(valid.astype(np.float32)), 8.0)
        pred = base.copy()
        pred[0, 0, 0] = 1.0
        pred[1, 3, 3] = -3.0
        pred[0, 2, 2] = 50.0
        self.assertEqual(keycentroid_l1(DenseField(pred), target).value, 2.0)

    def test_gradient_zero_outside_valid(self):
        pred, target = random_keycentroid_pair(3)
        gradient = keycentroid_l1(pred, target).gradient.data
        self.assertTrue((gradient[np.repeat(~target.valid_mask, 2, axis=0)] == 0).all())

    def test_no_valid_pixels(self):
        target = KeyCentroidField(DenseField.zeros(2, 3, 3), np.zeros((1, 3, 3), dtype=bool), DenseField.zeros(1, 3, 3), 8.0)
        with self.assertRaises(ValueError):
            keycentroid_l1(DenseField.zeros(2, 3, 3), target)

    def test_gradient_matches_finite_differences(self):
        for seed in range(100):
            pred, target = random_keycentroid_pair(seed)
            self.assertLess(finite_diff_check(keycentroid_l1, pred, target, eps=1e-4, rng_seed=seed), 1e-3)

    def test_gradient_check_with_large_displacements(self):
        for seed in range(10):
            pred, target = random_keycentroid_pair(seed, magnitude=(32.0, 400.0))
            self.assertLess(finite_diff_check(keycentroid_l1, pred, target, eps=1e-6, rng_seed=seed), 1e-3)

    def test_kinks_are_skipped(self):
        target = single_pair_target(7, 6)
        with self.assertLogs('losses.objectives', level='WARNING'):
            error = finite_diff_check(keycentroid_l1, target.base, target, eps=1e-4)
        self.assertEqual(error, 0.0)

    def test_lipschitz_in_each_coordinate(self):
        pred, target = random_keycentroid_pair(7)
        report = keycentroid_l1(pred, target)
        data = pred.data.copy()
        data[0][target.valid_mask[0]] += 1.0
        moved = keycentroid_l1(DenseField(data), target)
        count = int(target.valid_mask[0].sum())
        self.assertLessEqual(abs(moved.value - report.value), count / report.num_active + 1e-9)


class OffsetL1Tests(SimpleTestCase):

    def setUp(self):
        self.scene = generate_scene(2, (160, 160), 3)
        self.target, _ = encode_offsets(self.scene)

    def test_exact_prediction(self):
        self.assertEqual(offset_l1(self.target, self.target).value, 0.0)

    def test_uniform_error(self):
        data = self.target.field.data.copy()
        data[0] += 2.0
        data[1] -= 1.0
        report = offset_l1(DenseField(data), self.target)
        assert_allclose(report.value, 3.0, rtol=1e-5)
        self.assertEqual(report.num_active, int(self.target.foreground.sum()))

    def test_three_pixel_brute_force(self):
        foreground = np.zeros((3, 3), dtype=bool)
        foreground[0, 0] = foreground[1, 2] = foreground[2, 1] = True
        target = OffsetField(DenseField.zeros(2, 3, 3), foreground)
        pred = np.zeros((2, 3, 3), dtype=np.float32)
        pred[:, 0, 0] = (1.0, -2.0)
        pred[:, 1, 2] = (0.5, 0.0)
        pred[:, 2, 1] = (-4.0, 1.5)
        pred[:, 1, 1] = (100.0, 100.0)
        report = offset_l1(OffsetField(DenseField(pred), foreground), target)
        assert_allclose(report.value, (3.0 + 0.5 + 5.5) / 3)

    def test_no_foreground(self):
        target = OffsetField(DenseField.zeros(2, 3, 3), np.zeros((3, 3), dtype=bool))
        with self.assertRaises(ValueError):
            offset_l1(target, target)

    def test_gradient_matches_finite_differences(self):
        for seed in range(100):
            pred, target = random_offset_pair(seed)
            self.assertLess(finite_diff_check(offset_l1, pred, target, eps=1e-4, rng_seed=seed), 1e-3)

    def test_gradient_check_with_large_offsets(self):
        for seed in range(100):
            pred, target = random_offset_pair(seed, magnitude=(32.0, 400.0))
            self.assertLess(finite_diff_check(offset_l1, pred, target, eps=1e-6, rng_seed=seed), 1e-3)

    def test_encoded_offsets_shifted_far_from_target(self):
        pred = OffsetField(DenseField(self.target.field.data + 40.0), self.target.foreground)
        self.assertLess(finite_diff_check(offset_l1, pred, self.target, eps=1e-6), 1e-3)

    def test_eps_range(self):
        with self.assertRaises(ValueError):
            finite_diff_check(offset_l1, self.target, self.target, eps=1e-2)
