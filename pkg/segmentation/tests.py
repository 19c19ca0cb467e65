import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from encoding.encoders import encode_offsets, encode_scene
from encoding.targets import CentroidMode, MaskCentroidSet, OffsetField
from fields.core import DenseField, SubPixel
from poses.decoder import decode_poses
from poses.keypoints import PersonPose, RefinedKeypoint
from scenes.generator import generate_scene, occlude_scene
from scenes.skeleton import JOINT_NAMES, NUM_JOINTS

from .decoder import (
    assignment_radius,
    decode_instances,
    detect_centroids,
    embed_pixels,
    finalize_masks,
    igo_smooth,
    membership_dynamic,
    membership_static,
    pose_seg_unify,
    select_seeds,
)
from .instances import InstanceResult, MembershipMap, PixelEmbeddings, read_results, write_results

LEFT_HIP = JOINT_NAMES.index('left_hip')


def embeddings_at(points, shape=(8, 8)):
    """One embedding per listed point, attached to pixels in raster order."""
    count = len(points)
    flat = np.arange(count)
    return PixelEmbeddings(flat // shape[1], flat % shape[1], points, *shape)


def membership_of(values, ids=None, foreground=None):
    data = np.asarray(values, dtype=np.float32)
    if foreground is None:
        foreground = np.ones(data.shape[1:], dtype=bool)
    ids = range(data.shape[0]) if ids is None else ids
    return MembershipMap(ids, DenseField(data), foreground)


def pose_from(scene_person, confidence=0.9):
    """A pose on the GT keypoints whose most confident joint is the left hip."""
    joints = [
        RefinedKeypoint(j, SubPixel(float(x), float(y)), 0.95 if j == LEFT_HIP else confidence, 1)
        for j, (x, y) in enumerate(scene_person.keypoints)
    ]
    return PersonPose.from_joints(joints)


class EmbedPixelsTests(SimpleTestCase):

    def test_zero_offsets_give_pixel_coordinates(self):
        foreground = np.zeros((5, 6), dtype=bool)
        foreground[1:3, 2:5] = True
        embeddings = embed_pixels(DenseField.zeros(2, 5, 6), foreground)
        assert_array_equal(embeddings.points, np.stack([embeddings.xs, embeddings.ys], axis=1))
        self.assertEqual(len(embeddings), 6)
        assert_array_equal(embeddings.foreground, foreground)

    def test_ground_truth_offsets_collapse_to_centroid(self):
        scene = generate_scene(2, (160, 160), 3)
        offsets, centroids = encode_offsets(scene)
        embeddings = embed_pixels(offsets)
        owners = scene.owner_map()[embeddings.ys, embeddings.xs]
        for index in range(len(scene.persons)):
            points = embeddings.points[owners == index]
            assert_allclose(points, np.broadcast_to(centroids.centroids[index], points.shape), atol=1e-4)

    def test_noise_spread(self):
        foreground = np.ones((100, 100), dtype=bool)
        ys, xs = np.mgrid[0:100, 0:100]
        rng = np.random.default_rng(0)
        data = np.stack([50.0 - xs, 50.0 - ys]) + rng.normal(0.0, 1.0, size=(2, 100, 100))
        embeddings = embed_pixels(OffsetField(DenseField(data), foreground))
        rms = math.sqrt(((embeddings.points - (50.0, 50.0)) ** 2).sum(axis=1).mean())
        assert_allclose(rms, math.sqrt(2.0), rtol=0.05)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            embed_pixels(DenseField.zeros(2, 4, 4), np.ones((4, 5), dtype=bool))
        with self.assertRaises(ValueError):
            embed_pixels(DenseField.zeros(3, 4, 4), np.ones((4, 4), dtype=bool))


class MembershipStaticTests(SimpleTestCase):

    def centroids(self, points, sigma=5.0):
        return MaskCentroidSet(range(len(points)), np.array(points, dtype=np.float64), [sigma] * len(points))

    def test_analytic_values(self):
        sigma = 5.0
        half = sigma * math.sqrt(2 * math.log(2))
        embeddings = embeddings_at([(20.0, 20.0), (20.0 + half, 20.0), (20.0, 20.0 + 3 * sigma)])
        membership = membership_static(embeddings, self.centroids([(20.0, 20.0)], sigma))
        plane = membership.channel(0)
        self.assertEqual(plane[0, 0], 1.0)
        self.assertAlmostEqual(float(plane[0, 1]), 0.5, places=6)
        assert_allclose(plane[0, 2], math.exp(-4.5), rtol=1e-5)
        self.assertAlmostEqual(math.exp(-4.5), 0.011109, places=6)
        self.assertEqual(plane[5, 5], 0.0)

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        points = rng.uniform(0, 30, size=(20, 2))
        centres = [(10.0, 12.0), (22.0, 5.0)]
        first = membership_static(embeddings_at(points), self.centroids(centres))
        shifted = membership_static(
            embeddings_at(points + (7.5, -3.0)),
            self.centroids([(x + 7.5, y - 3.0) for x, y in centres]),
        )
        assert_allclose(first.field.data, shifted.field.data, atol=1e-6)

    def test_needs_a_centroid(self):
        with self.assertRaises(ValueError):
            membership_static(embeddings_at([(1.0, 1.0)]), self.centroids([]))


class MembershipDynamicTests(SimpleTestCase):

    def setUp(self):
        self.scene = generate_scene(2, (160, 160), 3)
        self.offsets, self.centroids = encode_offsets(self.scene, CentroidMode.DYNAMIC)
        self.embeddings = embed_pixels(self.offsets)

    def test_ground_truth_converges_quickly(self):
        seeds = [(x + 2.0, y - 1.0) for x, y in self.centroids.centroids]
        membership, centroids = membership_dynamic(self.embeddings, seeds)
        self.assertLessEqual(membership.iterations, 2)
        assert_allclose(centroids.centroids, self.centroids.centroids, atol=1e-4)
        for mask, person in zip(finalize_masks(membership), self.scene.persons):
            assert_array_equal(mask, person.mask)

    def test_single_round_matches_static_membership(self):
        seeds = [(x + 2.0, y - 1.0) for x, y in self.centroids.centroids]
        with self.assertLogs('segmentation.decoder', level='WARNING'):
            membership, centroids = membership_dynamic(self.embeddings, seeds, max_iters=1)
        static = membership_static(self.embeddings, centroids)
        assert_array_equal(membership.field.data, static.field.data)

    def test_single_instance_reaches_mean(self):
        points = np.random.default_rng(2).normal((30.0, 30.0), 0.5, size=(40, 2))
        _, centroids = membership_dynamic(embeddings_at(points), [(33.0, 34.0)])
        assert_allclose(centroids.centroids[0], points.mean(axis=0), atol=1e-3)

    def test_seed_beyond_assignment_radius_stays(self):
        points = np.full((10, 2), 30.0)
        _, centroids = membership_dynamic(embeddings_at(points), [(45.0, 30.0)])
        assert_allclose(centroids.centroids[0], (45.0, 30.0))

    def test_fixed_point_on_ground_truth(self):
        membership, centroids = membership_dynamic(self.embeddings, self.centroids.centroids)
        self.assertEqual(membership.iterations, 1)
        assert_allclose(centroids.centroids, self.centroids.centroids, atol=1e-4)

    def test_invalid_arguments(self):
        for kwargs in ({'max_iters': 0}, {'tol': 0.0}, {'sigma_j': -1.0}):
            with self.assertRaises(ValueError):
                membership_dynamic(self.embeddings, [(1.0, 1.0)], **kwargs)
        with self.assertRaises(ValueError):
            membership_dynamic(self.embeddings, [])


class IGOSmoothTests(SimpleTestCase):

    def test_constant_map_unchanged(self):
        membership = membership_of(np.full((2, 12, 12), 0.7))
        smoothed = igo_smooth(membership, 0.5)
        assert_allclose(smoothed.field.data, 0.7, atol=1e-6)

    def test_checkerboard_is_averaged(self):
        checker = (np.indices((12, 12)).sum(axis=0) % 2).astype(np.float32)
        smoothed = igo_smooth(membership_of(checker[np.newaxis]), 1.0).channel(0)
        interior = smoothed[3:-3, 3:-3]
        self.assertTrue(((interior > 0) & (interior < 1)).all())

    def test_values_stay_in_unit_interval(self):
        rng = np.random.default_rng(3)
        smoothed = igo_smooth(membership_of(rng.random((3, 16, 16))), 0.3)
        self.assertGreaterEqual(smoothed.field.data.min(), 0.0)
        self.assertLessEqual(smoothed.field.data.max(), 1.0)

    def test_sigma_range(self):
        membership = membership_of(np.zeros((1, 4, 4)))
        for sigma in (0.05, 1.5):
            with self.assertRaises(ValueError):
                igo_smooth(membership, sigma)


class FinalizeMasksTests(SimpleTestCase):

    def test_argmax_and_threshold(self):
        data = np.zeros((2, 1, 4), dtype=np.float32)
        data[0, 0, 0] = 1.0
        data[:, 0, 1] = (0.6, 0.8)
        data[:, 0, 2] = (0.5, 0.2)
        first, second = finalize_masks(membership_of(data))
        assert_array_equal(first[0], [True, False, False, False])
        assert_array_equal(second[0], [False, True, False, False])

    def test_tie_goes_to_lower_id(self):
        data = np.full((2, 1, 1), 0.7, dtype=np.float32)
        masks = finalize_masks(membership_of(data, ids=(5, 2)))
        self.assertFalse(masks[0][0, 0])
        self.assertTrue(masks[1][0, 0])

    def test_background_never_assigned(self):
        foreground = np.array([[True, False]])
        masks = finalize_masks(membership_of(np.ones((1, 1, 2)), foreground=foreground))
        assert_array_equal(masks[0], foreground)

    def test_masks_partition(self):
        rng = np.random.default_rng(4)
        masks = finalize_masks(membership_of(rng.random((4, 20, 20))))
        self.assertLessEqual(np.sum(masks, axis=0).max(), 1)


class DetectCentroidsTests(SimpleTestCase):

    def test_static_ground_truth_centroids(self):
        scene = generate_scene(3, (256, 256), 5)
        offsets, expected = encode_offsets(scene)
        detected = detect_centroids(embed_pixels(offsets))
        self.assertEqual(len(detected), len(scene.persons))
        found = sorted(map(tuple, detected.centroids))
        assert_allclose(found, sorted(map(tuple, expected.centroids)), atol=1e-4)

    def test_sparse_votes_ignored(self):
        points = [(10.0, 10.0), (30.0, 30.0), (50.0, 12.0)]
        self.assertEqual(len(detect_centroids(embeddings_at(points, (64, 64)))), 0)


class SelectSeedsTests(SimpleTestCase):

    def setUp(self):
        self.scene = generate_scene(2, (160, 160), 3)
        offsets, self.centroids = encode_offsets(self.scene, CentroidMode.DYNAMIC)
        self.embeddings = embed_pixels(offsets)

    def test_seeds_attract_their_instance(self):
        poses = [pose_from(person) for person in self.scene.persons]
        seeds = select_seeds(poses, self.embeddings)
        radius = assignment_radius(5.0)
        for seed, centre in zip(seeds, self.centroids.centroids):
            self.assertLessEqual(math.dist(seed, centre), radius)

    def test_unsupported_pose_falls_back(self):
        joints = [None] * NUM_JOINTS
        joints[3] = RefinedKeypoint(3, SubPixel(2.0, 2.0), 0.4, 1)
        joints[6] = RefinedKeypoint(6, SubPixel(4.0, 2.0), 0.8, 1)
        seeds = select_seeds([PersonPose.from_joints(joints)], self.embeddings)
        self.assertEqual(seeds, [SubPixel(4.0, 2.0)])


class PoseSegUnifyTests(SimpleTestCase):

    def setUp(self):
        self.scene = generate_scene(2, (160, 160), 3)
        self.masks = [person.mask for person in self.scene.persons]
        self.poses = [pose_from(person) for person in self.scene.persons]
        self.membership = membership_of(np.stack(self.masks).astype(np.float32))

    def test_one_pose_one_mask(self):
        results = pose_seg_unify(self.poses[:1], self.masks[:1], self.membership)
        self.assertEqual(len(results), 1)
        self.assertIs(results[0].pose, self.poses[0])

    def test_greedy_matching_recovers_pairs(self):
        results = pose_seg_unify(self.poses[::-1], self.masks, self.membership)
        self.assertEqual(len(results), 2)
        for result in results:
            index = self.poses.index(result.pose)
            assert_array_equal(result.mask, self.masks[index])
            self.assertEqual(result.score, result.pose.instance_score)

    def test_missing_mask(self):
        results = pose_seg_unify(self.poses, self.masks[:1], self.membership)
        self.assertEqual(len(results), 2)
        self.assertEqual(sum(result.mask is None for result in results), 1)

    def test_mask_without_pose_scored_by_membership(self):
        results = pose_seg_unify([], self.masks, self.membership)
        self.assertTrue(all(result.pose is None for result in results))
        self.assertEqual([result.score for result in results], [1.0, 1.0])

    def test_paired_by_index(self):
        results = pose_seg_unify(self.poses, self.masks, self.membership, paired=True)
        for pose, mask, result in zip(self.poses, self.masks, results):
            self.assertIs(result.pose, pose)
            assert_array_equal(result.mask, mask)
        with self.assertRaises(ValueError):
            pose_seg_unify(self.poses, self.masks[:1], self.membership, paired=True)

    def test_masks_past_the_poses_stand_alone(self):
        results = pose_seg_unify(self.poses[:1], self.masks, self.membership, paired=True)
        self.assertEqual(len(results), 2)
        self.assertIs(results[0].pose, self.poses[0])
        self.assertIsNone(results[1].pose)
        assert_array_equal(results[1].mask, self.masks[1])


class DecodeInstancesTests(SimpleTestCase):

    def assert_masks_recovered(self, scene, results):
        decoded = [result.mask for result in results if result.mask is not None]
        self.assertEqual(len(decoded), len(scene.persons))
        for person in scene.persons:
            self.assertTrue(any(np.array_equal(mask, person.mask) for mask in decoded))

    def test_dynamic_round_trip(self):
        scene = generate_scene(2, (401, 401), 4)
        targets = encode_scene(scene, 32, CentroidMode.DYNAMIC)
        poses, _ = decode_poses(targets.heatmaps, targets.keycentroid)
        results = decode_instances(targets.offsets, poses)
        self.assert_masks_recovered(scene, results)
        self.assertTrue(all(result.pose is not None for result in results))

    def test_figure_without_pose_gets_its_own_instance(self):
        scene = generate_scene(2, (401, 401), 4)
        offsets, _ = encode_offsets(scene, CentroidMode.DYNAMIC)
        results = decode_instances(offsets, [pose_from(scene.persons[0])])
        self.assert_masks_recovered(scene, results)
        self.assertEqual(sum(result.pose is None for result in results), 1)

    def test_hidden_congruent_figure_is_segmented(self):
        scene = generate_scene(2, (401, 401), 0, shared_pose=True, pose_jitter=0.05)
        scene = occlude_scene(scene, (1, 2), 0.7, rng_seed=0)
        targets = encode_scene(scene, 32, CentroidMode.DYNAMIC)
        poses, _ = decode_poses(targets.heatmaps, targets.keycentroid)
        results = decode_instances(targets.offsets, poses)
        self.assert_masks_recovered(scene, results)

    def test_static_round_trip(self):
        scene = generate_scene(2, (401, 401), 4)
        targets = encode_scene(scene, 32, CentroidMode.STATIC)
        poses, _ = decode_poses(targets.heatmaps, targets.keycentroid)
        results = decode_instances(targets.offsets, poses, mode='static')
        self.assert_masks_recovered(scene, results)

    def test_dynamic_without_poses_detects_centroids(self):
        scene = generate_scene(1, (128, 128), 2)
        offsets, _ = encode_offsets(scene, CentroidMode.DYNAMIC)
        with self.assertLogs('segmentation.decoder', level='INFO'):
            results = decode_instances(offsets)
        self.assert_masks_recovered(scene, results)

    def test_scores_descend(self):
        scene = generate_scene(3, (256, 256), 1)
        offsets, _ = encode_offsets(scene)
        results = decode_instances(offsets, mode='static')
        scores = [result.score for result in results]
        self.assertEqual(scores, sorted(scores, reverse=True))


class ResultsFileTests(SimpleTestCase):

    def test_round_trip(self):
        scene = generate_scene(2, (128, 128), 2)
        instances = [InstanceResult(None, person.mask, None, 0.5 + i / 10) for i, person in enumerate(scene.persons)]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'segm.json'
            payload = write_results({3: instances}, path)
            loaded = read_results(path)[3]
        self.assertEqual(payload[0]['area'], scene.persons[0].area)
        for original, restored in zip(instances, loaded):
            assert_array_equal(original.mask, restored.mask)
            self.assertEqual(original.score, restored.score)

    def test_instance_needs_content(self):
        with self.assertRaises(ValueError):
            InstanceResult(None, None, None, 0.0)
