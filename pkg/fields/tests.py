import math
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from scipy import ndimage

from . import kdcf
from .core import (
    DenseField,
    GridPoint,
    SubPixel,
    bilinear_sample,
    disk_contains,
    disk_mask,
)
from .kernels import gaussian_kernel, smooth_gaussian


class DenseFieldTests(SimpleTestCase):

    def test_shape_and_length(self):
        field = DenseField.zeros(3, 4, 5)
        self.assertEqual((field.channels, field.height, field.width), (3, 4, 5))
        self.assertEqual(len(field), 3 * 4 * 5)

    def test_two_dimensional_input_becomes_single_channel(self):
        field = DenseField(np.ones((6, 7)))
        self.assertEqual(field.shape, (1, 6, 7))

    def test_rejects_non_finite_values(self):
        data = np.zeros((1, 2, 2))
        data[0, 1, 1] = np.nan
        with self.assertRaises(ValueError):
            DenseField(data)

    def test_data_is_read_only(self):
        field = DenseField.zeros(1, 2, 2)
        with self.assertRaises(ValueError):
            field.data[0, 0, 0] = 1.0


class DiskTests(SimpleTestCase):

    def test_zero_distance(self):
        self.assertTrue(disk_contains(GridPoint(0, 0), SubPixel(0, 0), 32))

    def test_boundary_is_inclusive(self):
        self.assertTrue(disk_contains(GridPoint(32, 0), SubPixel(0, 0), 32))

    def test_outside(self):
        self.assertFalse(disk_contains(GridPoint(23, 23), SubPixel(0, 0), 32))

    def test_non_positive_radius(self):
        with self.assertRaises(ValueError):
            disk_contains(GridPoint(0, 0), SubPixel(0, 0), 0)

    def test_translation_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.integers(-40, 40, size=2)
            q = rng.integers(-40, 40, size=2)
            t = rng.integers(-100, 100, size=2)
            self.assertEqual(
                disk_contains(p + t, q + t, 20),
                disk_contains(p, q, 20),
            )

    def test_disk_mask_pixel_count(self):
        mask = disk_mask(128, 128, SubPixel(64, 64), 32)
        self.assertEqual(int(mask.sum()), 3209)

    def test_unit_disk_marks_four_neighbourhood(self):
        mask = disk_mask(9, 9, SubPixel(4, 4), 1)
        self.assertEqual(int(mask.sum()), 5)


class GaussianKernelTests(SimpleTestCase):

    def test_peak_values(self):
        self.assertAlmostEqual(gaussian_kernel(0, 0, 1), 1 / (2 * math.pi), places=6)
        self.assertAlmostEqual(gaussian_kernel(0, 0, 0.5), 0.636620, places=6)

    def test_unit_offset(self):
        self.assertAlmostEqual(gaussian_kernel(1, 0, 1), 0.096532, places=6)

    def test_invalid_sigma(self):
        with self.assertRaises(ValueError):
            gaussian_kernel(0, 0, 0)

    def test_radial_symmetry(self):
        for x, y in [(1.5, -0.3), (0.2, 2.0), (-3.0, 1.0)]:
            value = gaussian_kernel(x, y, 0.8)
            self.assertAlmostEqual(value, gaussian_kernel(-x, -y, 0.8))
            self.assertAlmostEqual(value, gaussian_kernel(y, x, 0.8))

    def test_monotone_in_radius(self):
        values = [gaussian_kernel(r, 0, 0.7) for r in np.linspace(0, 4, 30)]
        self.assertTrue(all(a > b for a, b in zip(values, values[1:])))


class SmoothGaussianTests(SimpleTestCase):

    def test_impulse_keeps_peak_and_mass(self):
        data = np.zeros((1, 9, 9))
        data[0, 4, 4] = 1.0
        smoothed = smooth_gaussian(DenseField(data), [0.5]).data[0]
        self.assertEqual(np.unravel_index(np.argmax(smoothed), smoothed.shape), (4, 4))
        self.assertAlmostEqual(float(smoothed.sum()), 1.0, delta=1e-4)

    def test_constant_field_is_unchanged(self):
        for sigma in (0.1, 0.5, 1.0, 2.5):
            field = DenseField(np.full((1, 12, 17), 0.7))
            assert_allclose(smooth_gaussian(field, [sigma]).data, 0.7, atol=1e-5)

    def test_close_impulses_survive_small_sigma(self):
        data = np.zeros((1, 15, 15))
        data[0, 7, 4] = 1.0
        data[0, 7, 10] = 0.8
        smoothed = smooth_gaussian(DenseField(data), [0.1]).data[0]
        peaks = (ndimage.maximum_filter(smoothed, size=3) == smoothed) & (smoothed > 0.1)
        self.assertEqual(sorted(zip(*np.nonzero(peaks))), [(7, 4), (7, 10)])

    def test_linearity(self):
        rng = np.random.default_rng(11)
        f = rng.random((2, 20, 24))
        g = rng.random((2, 20, 24))
        sigmas = [0.6, 1.3]
        combined = smooth_gaussian(DenseField(2.0 * f - 0.5 * g), sigmas).data
        separate = (
            2.0 * smooth_gaussian(DenseField(f), sigmas).data
            - 0.5 * smooth_gaussian(DenseField(g), sigmas).data
        )
        assert_allclose(combined, separate, atol=1e-5)

    def test_single_peak_argmax_is_preserved(self):
        rng = np.random.default_rng(5)
        ys, xs = np.mgrid[0:31, 0:31]
        for _ in range(10):
            cx, cy = rng.uniform(5, 25, size=2)
            bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / 18.0)
            before = np.unravel_index(np.argmax(bump), bump.shape)
            for sigma in (0.1, 0.5, 1.0):
                after = smooth_gaussian(DenseField(bump), [sigma]).data[0]
                self.assertEqual(np.unravel_index(np.argmax(after), after.shape), before)

    def test_sigma_list_must_match_channels(self):
        with self.assertRaises(ValueError):
            smooth_gaussian(DenseField.zeros(2, 5, 5), [0.5])
        with self.assertRaises(ValueError):
            smooth_gaussian(DenseField.zeros(1, 5, 5), [0.0])

    def test_worker_count_does_not_change_result(self):
        rng = np.random.default_rng(2)
        field = DenseField(rng.random((5, 30, 30)))
        sigmas = [0.2, 0.4, 0.6, 0.8, 0.9]
        assert_allclose(
            smooth_gaussian(field, sigmas, workers=1).data,
            smooth_gaussian(field, sigmas, workers=4).data,
        )


class BilinearSampleTests(SimpleTestCase):

    def test_interpolates_between_pixels(self):
        plane = np.array([[0.0, 1.0], [2.0, 3.0]])
        self.assertAlmostEqual(bilinear_sample(plane, 0.5, 0.5), 1.5)
        self.assertAlmostEqual(bilinear_sample(plane, 1.0, 0.0), 1.0)

    def test_outside_reads_zero(self):
        plane = np.ones((3, 3))
        self.assertEqual(bilinear_sample(plane, -5.0, 1.0), 0.0)


class KDCFTests(SimpleTestCase):

    def test_file_round_trip(self):
        rng = np.random.default_rng(0)
        field = DenseField(rng.random((3, 4, 5)))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'field.kdcf')
            kdcf.save(field, path)
            loaded = kdcf.load(path)
        np.testing.assert_array_equal(loaded.data, field.data)

    def test_header_layout(self):
        payload = kdcf.dumps(DenseField.zeros(2, 3, 4))
        self.assertEqual(payload[:4], b'KDCF')
        self.assertEqual(int.from_bytes(payload[4:6], 'little'), 1)
        self.assertEqual(int.from_bytes(payload[6:10], 'little'), 3)
        self.assertEqual(int.from_bytes(payload[10:14], 'little'), 4)
        self.assertEqual(int.from_bytes(payload[14:18], 'little'), 2)
        self.assertEqual(len(payload), 18 + 2 * 3 * 4 * 4)

    def test_bad_magic(self):
        payload = bytearray(kdcf.dumps(DenseField.zeros(1, 2, 2)))
        payload[:4] = b'NOPE'
        with self.assertRaises(kdcf.KDCFError):
            kdcf.loads(bytes(payload))

    def test_truncated_payload(self):
        payload = kdcf.dumps(DenseField.zeros(1, 2, 2))
        with self.assertRaises(kdcf.KDCFError):
            kdcf.loads(payload[:-3])
