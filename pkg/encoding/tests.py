import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from scenes.generator import generate_scene
from scenes.scene import PersonGT, Scene
from scenes.skeleton import JOINT_NAMES, NUM_JOINTS

from .encoders import encode_heatmaps, encode_keycentroid, encode_offsets, encode_scene, exclusion_mask
from .targets import CentroidMode, MaskCentroidSet, OffsetField

NOSE = JOINT_NAMES.index('nose')
RIGHT_KNEE = JOINT_NAMES.index('right_knee')


def person_at(instance_id, keypoints, mask, visible=None, is_small=False):
    visible = np.ones(NUM_JOINTS, dtype=bool) if visible is None else visible
    return PersonGT(instance_id=instance_id, keypoints=keypoints, visible=visible,
                    mask=mask, is_small=is_small)


def point_person(instance_id, x, y, shape=(128, 128), **kwargs):
    """All joints stacked at (x, y) with a one-pixel mask there."""
    mask = np.zeros(shape, dtype=bool)
    mask[int(y), int(x)] = True
    keypoints = np.tile([float(x), float(y)], (NUM_JOINTS, 1))
    return person_at(instance_id, keypoints, mask, **kwargs)


class EncodeHeatmapsTests(SimpleTestCase):

    def test_disk_pixel_count(self):
        scene = Scene(128, 128, [point_person(1, 64, 64)])
        heatmaps = encode_heatmaps(scene, 32)
        self.assertEqual(int(heatmaps.channel(NOSE).sum()), 3209)

    def test_unit_radius_marks_five_pixels(self):
        scene = generate_scene(2, (128, 128), 5)
        heatmaps = encode_heatmaps(scene, 1)
        for joint in range(NUM_JOINTS):
            self.assertLessEqual(heatmaps.channel(joint).sum(), 5 * len(scene.persons))

    def test_no_visible_keypoints(self):
        person = point_person(1, 64, 64, visible=np.zeros(NUM_JOINTS, dtype=bool))
        heatmaps = encode_heatmaps(Scene(128, 128, [person]), 32)
        self.assertEqual(heatmaps.data.sum(), 0)

    def test_binary_and_nonzero_iff_visible(self):
        scene = generate_scene(1, (128, 128), 2)
        heatmaps = encode_heatmaps(scene, 8)
        self.assertTrue(np.isin(heatmaps.data, (0.0, 1.0)).all())
        self.assertTrue((heatmaps.data.reshape(NUM_JOINTS, -1).max(axis=1) == 1).all())

    def test_invalid_radius(self):
        with self.assertRaises(ValueError):
            encode_heatmaps(Scene(128, 128, [point_person(1, 64, 64)]), 0)

    def test_workers_give_identical_output(self):
        scene = generate_scene(2, (128, 128), 5)
        assert_array_equal(encode_heatmaps(scene, 16).data, encode_heatmaps(scene, 16, workers=4).data)


class EncodeKeyCentroidTests(SimpleTestCase):

    def test_displacement_under_keypoint(self):
        field = encode_keycentroid(Scene(128, 128, [point_person(1, 64, 64)]), 32)
        dx, dy = field.displacement(NOSE)
        self.assertEqual((dx[64, 64], dy[64, 64]), (0.0, 0.0))
        self.assertEqual(field.response.channel(NOSE)[64, 64], 1.0)

    def test_displacement_points_to_keypoint(self):
        field = encode_keycentroid(Scene(64, 64, [point_person(1, 10, 10, shape=(64, 64))]), 32)
        dx, dy = field.displacement(NOSE)
        self.assertEqual((dx[4, 3], dy[4, 3]), (7.0, 6.0))

    def test_zero_outside_disk_and_bounded_inside(self):
        scene = generate_scene(2, (128, 128), 5)
        field = encode_keycentroid(scene, 16)
        magnitude = np.hypot(field.base.data[0::2], field.base.data[1::2])
        self.assertTrue((magnitude[~field.valid_mask] == 0).all())
        self.assertLessEqual(magnitude[field.valid_mask].max(), 16 + 1e-5)

    def test_overlap_resolves_to_nearer_keypoint(self):
        first = point_person(1, 50, 64)
        second = point_person(2, 70, 64)
        field = encode_keycentroid(Scene(128, 128, [first, second]), 32)
        dx, _ = field.displacement(RIGHT_KNEE)
        self.assertEqual(dx[64, 55], -5.0)
        self.assertEqual(dx[64, 65], 5.0)
        # midpoint tie goes to the lower instance id
        self.assertEqual(dx[64, 60], -10.0)

    def test_response_rim_value(self):
        field = encode_keycentroid(Scene(128, 128, [point_person(1, 64, 64)]), 30)
        assert_allclose(field.response.channel(NOSE)[64, 94], math.exp(-4.5), rtol=1e-6)
        self.assertEqual(field.response.channel(NOSE)[64, 95], 0.0)


class EncodeOffsetsTests(SimpleTestCase):

    def test_single_pixel_mask(self):
        scene = Scene(16, 16, [point_person(1, 5, 5, shape=(16, 16))])
        offsets, centroids = encode_offsets(scene, CentroidMode.STATIC)
        self.assertEqual(tuple(centroids.centroid(0)), (5.0, 5.0))
        self.assertEqual(offsets.field.data[:, 5, 5].tolist(), [0.0, 0.0])

    def test_rectangle_centre(self):
        mask = np.zeros((40, 40), dtype=bool)
        mask[5:15, 10:30] = True
        person = person_at(1, np.full((NUM_JOINTS, 2), 12.0), mask)
        _, centroids = encode_offsets(Scene(40, 40, [person]))
        assert_allclose(centroids.centroids[0], [19.5, 9.5])

    def test_l_shape_uses_pixel_mean(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[2:12, 2:4] = True
        mask[10:12, 2:12] = True
        person = person_at(1, np.full((NUM_JOINTS, 2), 3.0), mask)
        _, centroids = encode_offsets(Scene(20, 20, [person]))
        ys, xs = np.nonzero(mask)
        assert_allclose(centroids.centroids[0], [xs.mean(), ys.mean()], rtol=1e-6)
        self.assertFalse(mask[int(round(ys.mean())), int(round(xs.mean()))])

    def test_pixel_plus_offset_reaches_centroid(self):
        scene = generate_scene(3, (256, 256), 1)
        for mode in CentroidMode:
            offsets, centroids = encode_offsets(scene, mode)
            owners = scene.owner_map()
            ys, xs = np.nonzero(offsets.foreground)
            ex = xs + offsets.field.data[0, ys, xs]
            ey = ys + offsets.field.data[1, ys, xs]
            expected = centroids.centroids[owners[ys, xs]]
            assert_allclose(ex, expected[:, 0], atol=1e-4)
            assert_allclose(ey, expected[:, 1], atol=1e-4)
            self.assertTrue((offsets.field.data[:, ~offsets.foreground] == 0).all())

    def test_embedding_equals_centroid_far_from_small_centroid(self):
        mask = np.zeros((128, 128), dtype=bool)
        mask[88:98, 60:120] = True
        person = person_at(1, np.tile([24.37, 93.04], (NUM_JOINTS, 1)), mask)
        offsets, centroids = encode_offsets(Scene(128, 128, [person]), CentroidMode.DYNAMIC)
        ys, xs = np.nonzero(offsets.foreground)
        cx, cy = centroids.centroids[0]
        assert_array_equal(xs.astype(np.float32) + offsets.field.data[0, ys, xs], np.float32(cx))
        assert_array_equal(ys.astype(np.float32) + offsets.field.data[1, ys, xs], np.float32(cy))
        assert_array_equal(xs + offsets.field.data[0, ys, xs].astype(np.float64), cx)
        assert_allclose(centroids.centroids[0], [24.37, 93.04], atol=1e-4)

    def test_embedding_equals_centroid_exactly_across_seeds(self):
        for seed in range(60):
            for count in (1, 3, 4):
                scene = generate_scene(count, (401, 401), seed)
                owners = scene.owner_map()
                for mode in CentroidMode:
                    offsets, centroids = encode_offsets(scene, mode)
                    ys, xs = np.nonzero(offsets.foreground)
                    expected = centroids.centroids[owners[ys, xs]].astype(np.float32)
                    with self.subTest(seed=seed, persons=count, mode=mode.value):
                        assert_array_equal(xs.astype(np.float32) + offsets.field.data[0, ys, xs], expected[:, 0])
                        assert_array_equal(ys.astype(np.float32) + offsets.field.data[1, ys, xs], expected[:, 1])

    def test_dynamic_centroid_is_visible_keypoint_nearest_mean(self):
        scene = generate_scene(1, (128, 128), 4)
        person = scene.persons[0]
        _, centroids = encode_offsets(scene, CentroidMode.DYNAMIC)
        mean = np.asarray(person.mask_mean())
        nearest = person.keypoints[np.argmin(((person.keypoints - mean) ** 2).sum(axis=1))]
        assert_allclose(centroids.centroids[0], nearest, atol=1e-4)
        self.assertEqual(centroids.mode, CentroidMode.DYNAMIC)

    def test_dynamic_falls_back_without_visible_joints(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[4:8, 4:8] = True
        person = person_at(1, np.zeros((NUM_JOINTS, 2)), mask, visible=np.zeros(NUM_JOINTS, dtype=bool))
        with self.assertLogs('encoding.encoders', level='INFO'):
            _, centroids = encode_offsets(Scene(20, 20, [person]), 'dynamic')
        assert_allclose(centroids.centroids[0], [5.5, 5.5])

    def test_static_centroid_inside_bbox(self):
        scene = generate_scene(2, (128, 128), 5)
        _, centroids = encode_offsets(scene)
        for index, person in enumerate(scene.persons):
            x, y, w, h = person.bbox()
            cx, cy = centroids.centroids[index]
            self.assertTrue(x <= cx <= x + w and y <= cy <= y + h)

    def test_empty_mask_rejected(self):
        person = person_at(1, np.zeros((NUM_JOINTS, 2)), np.zeros((8, 8), dtype=bool))
        with self.assertRaises(ValueError):
            encode_offsets(Scene(8, 8, [person]))

    def test_centroid_set_round_trip(self):
        _, centroids = encode_offsets(generate_scene(2, (128, 128), 5), 'dynamic', sigma_j=4.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'centroids.json'
            centroids.save(path)
            loaded = MaskCentroidSet.load(path)
        assert_array_equal(loaded.centroids, centroids.centroids)
        self.assertEqual(loaded.sigmas, (4.0, 4.0))
        self.assertEqual(loaded.mode, CentroidMode.DYNAMIC)

    def test_offset_field_tensor_round_trip(self):
        offsets, _ = encode_offsets(generate_scene(1, (128, 128), 4))
        restored = OffsetField.from_field(offsets.to_field())
        assert_array_equal(restored.field.data, offsets.field.data)
        assert_array_equal(restored.foreground, offsets.foreground)


class ExclusionMaskTests(SimpleTestCase):

    def test_all_trainable_without_flags(self):
        scene = generate_scene(2, (128, 128), 5)
        self.assertTrue((exclusion_mask(scene).data == 1).all())

    def test_flagged_person_excluded(self):
        scene = generate_scene(1, (128, 128), 5, min_area=10 ** 6)
        keep = exclusion_mask(scene).channel(0) > 0
        assert_array_equal(~keep, scene.persons[0].mask)

    def test_overlap_with_unflagged_person_stays_trainable(self):
        small = np.zeros((20, 20), dtype=bool)
        small[2:10, 2:10] = True
        large = np.zeros((20, 20), dtype=bool)
        large[6:16, 6:16] = True
        scene = Scene(20, 20, [
            person_at(1, np.full((NUM_JOINTS, 2), 7.0), large),
            person_at(2, np.full((NUM_JOINTS, 2), 4.0), small, is_small=True),
        ])
        keep = exclusion_mask(scene).channel(0) > 0
        self.assertTrue(keep[7, 7])
        self.assertFalse(keep[3, 3])
        self.assertTrue(keep[18, 18])


class EncodeSceneTests(SimpleTestCase):

    def test_bundle_shapes(self):
        scene = generate_scene(2, (128, 128), 5)
        targets = encode_scene(scene, 16, 'dynamic', sigma_j=4.0)
        self.assertEqual(targets.heatmaps.shape, (17, 128, 128))
        self.assertEqual(targets.keycentroid.base.shape, (34, 128, 128))
        self.assertEqual(targets.keycentroid.valid_mask.shape, (17, 128, 128))
        self.assertEqual(targets.offsets.shape, (2, 128, 128))
        self.assertEqual(len(targets.centroids), 2)
        self.assertEqual(targets.exclusion.shape, (1, 128, 128))
        assert_array_equal(targets.keycentroid.valid_mask, targets.heatmaps.data > 0)
