import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from encoding.encoders import encode_heatmaps, encode_keycentroid
from fields.core import DenseField, GridPoint, SubPixel
from fields.kernels import smooth_plane
from scenes.generator import generate_scene
from scenes.skeleton import COCO_SKELETON, JOINT_NAMES, NUM_JOINTS

from .decoder import (
    PoseDecodeConfig,
    assemble_poses,
    candidate_vote,
    decode_poses,
    extract_candidates,
    perturb,
    pgo_smooth,
    refine_candidates,
    refine_keypoint,
    rescore,
    suppress,
)
from .keypoints import KeypointCandidate, PersonPose, RefinedKeypoint, read_results, write_results

WRIST = JOINT_NAMES.index('left_wrist')
SHOULDER = JOINT_NAMES.index('left_shoulder')


def encoded(scene, radius=32):
    return encode_heatmaps(scene, radius), encode_keycentroid(scene, radius)


def nearest_distance(refined, joint, point):
    distances = [math.dist(kp.position, point) for kp in refined if kp.joint == joint]
    return min(distances, default=math.inf)


def ground_truth_keypoints(scene):
    """RefinedKeypoints placed exactly on every visible GT joint."""
    keypoints = []
    for person in scene.persons:
        for joint, ((x, y), visible) in enumerate(zip(person.keypoints, person.visible)):
            if visible:
                keypoints.append(RefinedKeypoint(joint, SubPixel(float(x), float(y)), 0.9, 10))
    return keypoints


class PGOSmoothTests(SimpleTestCase):

    def impulse(self):
        data = np.zeros((NUM_JOINTS, 15, 15), dtype=np.float32)
        data[:, 7, 7] = 1.0
        return DenseField(data)

    def test_variance_class_sigmas(self):
        heatmaps = self.impulse()
        smoothed = pgo_smooth(heatmaps, COCO_SKELETON, 0.3, 0.7)
        assert_allclose(smoothed.channel(WRIST), smooth_plane(heatmaps.channel(WRIST), 0.3))
        assert_allclose(smoothed.channel(SHOULDER), smooth_plane(heatmaps.channel(SHOULDER), 0.7))
        self.assertGreater(smoothed.channel(WRIST)[7, 7], smoothed.channel(SHOULDER)[7, 7])

    def test_zero_stays_zero(self):
        smoothed = pgo_smooth(DenseField.zeros(NUM_JOINTS, 9, 9))
        self.assertEqual(np.abs(smoothed.data).max(), 0.0)

    def test_peak_location_preserved(self):
        smoothed = pgo_smooth(self.impulse())
        for joint in range(NUM_JOINTS):
            self.assertEqual(np.unravel_index(np.argmax(smoothed.channel(joint)), (15, 15)), (7, 7))

    def test_sigma_ranges(self):
        heatmaps = self.impulse()
        for hvk, lvk in ((0.05, 0.7), (0.5, 0.7), (0.3, 0.4), (0.3, 1.0)):
            with self.assertRaises(ValueError):
                pgo_smooth(heatmaps, COCO_SKELETON, hvk, lvk)


class ExtractCandidatesTests(SimpleTestCase):

    def peaks(self, points, size=64):
        data = np.zeros((1, size, size), dtype=np.float32)
        for x, y, score in points:
            data[0, y, x] = score
        return DenseField(data)

    def test_disk_gives_candidate_inside(self):
        scene = generate_scene(1, (128, 128), 2)
        heatmaps, _ = encoded(scene)
        candidates = extract_candidates(pgo_smooth(heatmaps), 0.5, 10)
        x, y = scene.persons[0].keypoints[WRIST]
        wrist = [c for c in candidates if c.joint == WRIST]
        self.assertGreaterEqual(len(wrist), 1)
        for candidate in wrist:
            self.assertLessEqual(math.dist(candidate.position, (x, y)), 32)

    def test_far_peaks_both_kept(self):
        candidates = extract_candidates(self.peaks([(10, 20, 0.9), (40, 20, 0.8)]), 0.5, 10)
        self.assertEqual([c.position for c in candidates], [GridPoint(10, 20), GridPoint(40, 20)])

    def test_close_peaks_keep_higher(self):
        candidates = extract_candidates(self.peaks([(10, 20, 0.8), (16, 20, 0.9)]), 0.5, 10)
        self.assertEqual([c.position for c in candidates], [GridPoint(16, 20)])

    def test_close_tie_keeps_raster_first(self):
        candidates = extract_candidates(self.peaks([(16, 20, 0.9), (10, 20, 0.9)]), 0.5, 10)
        self.assertEqual([c.position for c in candidates], [GridPoint(10, 20)])

    def test_below_threshold_ignored(self):
        self.assertEqual(extract_candidates(self.peaks([(10, 20, 0.4)]), 0.5, 10), [])

    def test_sorted_by_score(self):
        candidates = extract_candidates(self.peaks([(5, 5, 0.6), (30, 30, 0.95), (50, 10, 0.7)]), 0.5, 10)
        scores = [c.raw_score for c in candidates]
        self.assertEqual(scores, sorted(scores, reverse=True))

    def test_suppression_is_idempotent(self):
        rng = np.random.default_rng(3)
        noisy = DenseField(rng.random((2, 48, 48)))
        candidates = extract_candidates(noisy, 0.5, 6)
        self.assertEqual(suppress(candidates, 6), candidates)

    def test_invalid_threshold(self):
        with self.assertRaises(ValueError):
            extract_candidates(self.peaks([]), 1.0, 10)


class RefineKeypointTests(SimpleTestCase):

    def test_noiseless_recovery(self):
        scene = generate_scene(1, (128, 128), 9)
        heatmaps, kc_field = encoded(scene)
        smoothed = pgo_smooth(heatmaps)
        for candidate in extract_candidates(smoothed, 0.5, 10):
            keypoint = refine_keypoint(candidate, kc_field, smoothed, 32)
            target = scene.persons[0].keypoints[candidate.joint]
            self.assertLess(math.dist(keypoint.position, target), 0.5)
            self.assertGreater(keypoint.confidence, 0.9)
            self.assertGreaterEqual(keypoint.votes, 1)

    def test_exact_integer_keypoint(self):
        data = np.zeros((NUM_JOINTS, 128, 128), dtype=np.float32)
        yy, xx = np.mgrid[0:128, 0:128]
        disk = (xx - 64) ** 2 + (yy - 64) ** 2 <= 32 ** 2
        data[SHOULDER][disk] = 1.0
        heatmaps = DenseField(data)
        kc = np.zeros((2 * NUM_JOINTS, 128, 128), dtype=np.float32)
        kc[2 * SHOULDER][disk] = (64 - xx)[disk]
        kc[2 * SHOULDER + 1][disk] = (64 - yy)[disk]
        candidate = KeypointCandidate(SHOULDER, GridPoint(50, 40), 1.0)
        keypoint = refine_keypoint(candidate, DenseField(kc), heatmaps, 32)
        assert_allclose(keypoint.position, (64.0, 64.0), atol=1e-4)
        self.assertEqual(keypoint.confidence, 1.0)

    def test_zero_displacements_keep_symmetric_candidate(self):
        data = np.zeros((NUM_JOINTS, 64, 64), dtype=np.float32)
        yy, xx = np.mgrid[0:64, 0:64]
        data[WRIST][(xx - 30) ** 2 + (yy - 30) ** 2 <= 16] = 1.0
        candidate = KeypointCandidate(WRIST, GridPoint(30, 30), 1.0)
        keypoint = refine_keypoint(candidate, DenseField.zeros(2 * NUM_JOINTS, 64, 64), DenseField(data), 8)
        assert_allclose(keypoint.position, (30.0, 30.0), atol=1e-9)

    def test_compact_votes_give_weighted_mean(self):
        rng = np.random.default_rng(12)
        yy, xx = np.mgrid[0:64, 0:64]
        disk = (xx - 30) ** 2 + (yy - 30) ** 2 <= 36
        data = np.zeros((NUM_JOINTS, 64, 64), dtype=np.float32)
        data[WRIST][disk] = rng.uniform(0.5, 1.0, size=int(disk.sum()))
        kc = np.zeros((2 * NUM_JOINTS, 64, 64), dtype=np.float32)
        kc[2 * WRIST][disk] = (31.0 - xx[disk]) + rng.uniform(-1, 1, size=int(disk.sum()))
        kc[2 * WRIST + 1][disk] = (29.0 - yy[disk]) + rng.uniform(-1, 1, size=int(disk.sum()))
        candidate = KeypointCandidate(WRIST, GridPoint(30, 30), 1.0)
        keypoint = refine_keypoint(candidate, DenseField(kc), DenseField(data), 8, vote_radius=20.0)
        weights = data[WRIST][disk].astype(np.float64)
        expected = (
            (weights * (xx[disk] + kc[2 * WRIST][disk].astype(np.float64))).sum() / weights.sum(),
            (weights * (yy[disk] + kc[2 * WRIST + 1][disk].astype(np.float64))).sum() / weights.sum(),
        )
        assert_allclose(keypoint.position, expected, atol=1e-6)

    def test_never_moves_beyond_radius(self):
        rng = np.random.default_rng(4)
        heatmaps = DenseField(rng.uniform(0.5, 1.0, size=(NUM_JOINTS, 40, 40)))
        kc = DenseField(rng.uniform(-30, 30, size=(2 * NUM_JOINTS, 40, 40)))
        for x, y in ((5, 5), (20, 20), (35, 10)):
            candidate = KeypointCandidate(3, GridPoint(x, y), 0.9)
            keypoint = refine_keypoint(candidate, kc, heatmaps, 6)
            self.assertLessEqual(math.dist(keypoint.position, (x, y)), 6 + 1e-9)
            self.assertTrue(0.0 <= keypoint.confidence <= 1.0)

    def test_no_votes_falls_back(self):
        candidate = KeypointCandidate(0, GridPoint(5, 5), 0.7)
        with self.assertLogs('poses.decoder', level='WARNING'):
            keypoint = refine_keypoint(candidate, DenseField.zeros(2 * NUM_JOINTS, 10, 10),
                                       DenseField.zeros(NUM_JOINTS, 10, 10), 4)
        self.assertEqual(keypoint.position, (5.0, 5.0))
        self.assertEqual(keypoint.confidence, 0.7)


class AssemblePosesTests(SimpleTestCase):

    def test_single_person(self):
        scene = generate_scene(1, (128, 128), 3)
        poses = assemble_poses(ground_truth_keypoints(scene), COCO_SKELETON, 64)
        self.assertEqual(len(poses), 1)
        self.assertEqual(poses[0].num_present, NUM_JOINTS)
        assert_allclose(poses[0].instance_score, 0.9)

    def test_separated_persons(self):
        scene = generate_scene(2, (401, 401), 8)
        poses = assemble_poses(ground_truth_keypoints(scene), COCO_SKELETON, 64)
        self.assertEqual(len(poses), 2)
        for pose in poses:
            owners = {
                min(range(len(scene.persons)),
                    key=lambda i: math.dist(kp.position, scene.persons[i].keypoints[kp.joint]))
                for kp in pose.present()
            }
            self.assertEqual(len(owners), 1)

    def test_empty(self):
        self.assertEqual(assemble_poses([], COCO_SKELETON, 64), [])

    def test_missing_joint_bridged_by_ancestor(self):
        scene = generate_scene(1, (128, 128), 3)
        elbow = JOINT_NAMES.index('left_elbow')
        keypoints = [kp for kp in ground_truth_keypoints(scene) if kp.joint != elbow]
        poses = assemble_poses(keypoints, COCO_SKELETON, 64)
        self.assertEqual(len(poses), 1)
        self.assertEqual(poses[0].num_present, NUM_JOINTS - 1)

    def test_high_confidence_joint_ties_to_lower_id(self):
        joints = [None] * NUM_JOINTS
        joints[4] = RefinedKeypoint(4, SubPixel(1.0, 1.0), 0.8, 1)
        joints[2] = RefinedKeypoint(2, SubPixel(2.0, 2.0), 0.8, 1)
        self.assertEqual(PersonPose.from_joints(joints).high_confidence_joint().joint, 2)


class RefineCandidatesTests(SimpleTestCase):

    def overlapping_disks(self, first=(40, 40), second=(52, 52), radius=16, size=96):
        """One joint channel holding two same-joint disks, displacements to the nearer centre."""
        yy, xx = np.mgrid[0:size, 0:size]
        heatmap = np.zeros((1, size, size), dtype=np.float32)
        kc = np.zeros((2, size, size), dtype=np.float32)
        d_first = (xx - first[0]) ** 2 + (yy - first[1]) ** 2
        d_second = (xx - second[0]) ** 2 + (yy - second[1]) ** 2
        inside = (d_first <= radius ** 2) | (d_second <= radius ** 2)
        heatmap[0][inside] = 1.0
        target_x = np.where(d_second < d_first, second[0], first[0])
        target_y = np.where(d_second < d_first, second[1], first[1])
        kc[0][inside] = (target_x - xx)[inside]
        kc[1][inside] = (target_y - yy)[inside]
        return DenseField(heatmap), DenseField(kc)

    def test_hidden_disk_recovered_from_votes(self):
        heatmaps, kc_field = self.overlapping_disks()
        config = PoseDecodeConfig(radius=16)
        candidates = extract_candidates(heatmaps, 0.5, 10)
        # every peak sits on the upper-left rim, which belongs to the first disk
        self.assertTrue(all(math.dist(candidate_vote(c, kc_field), (40, 40)) < 1e-6 for c in candidates))
        refined = refine_candidates(candidates, kc_field, heatmaps, config)
        positions = sorted(tuple(kp.position) for kp in refined)
        assert_allclose(positions, [(40.0, 40.0), (52.0, 52.0)], atol=1e-6)

    def test_pixel_votes_skip_residual_pass(self):
        heatmaps, kc_field = self.overlapping_disks()
        config = PoseDecodeConfig(radius=16, use_keycentroid=False)
        refined = refine_candidates(extract_candidates(heatmaps, 0.5, 10), kc_field, heatmaps, config)
        self.assertGreaterEqual(len(refined), 1)
        self.assertTrue(all(math.dist(kp.position, (52, 52)) > 5 for kp in refined))

    def test_small_clusters_ignored(self):
        heatmaps, kc_field = self.overlapping_disks()
        config = PoseDecodeConfig(radius=16, min_cluster_votes=10 ** 6)
        refined = refine_candidates(extract_candidates(heatmaps, 0.5, 10), kc_field, heatmaps, config)
        self.assertEqual(len(refined), 1)
        assert_allclose(refined[0].position, (40.0, 40.0), atol=1e-6)


class DecodePosesTests(SimpleTestCase):

    def assert_round_trip(self, scene):
        heatmaps, kc_field = encoded(scene)
        poses, refined = decode_poses(heatmaps, kc_field)
        self.assertEqual(len(poses), len(scene.persons))
        for person in scene.persons:
            for joint in range(NUM_JOINTS):
                if person.visible[joint]:
                    self.assertLess(nearest_distance(refined, joint, person.keypoints[joint]), 0.5)

    def test_round_trip_single(self):
        self.assert_round_trip(generate_scene(1, (401, 401), 0))

    def test_round_trip_crowd(self):
        for seed in range(3):
            self.assert_round_trip(generate_scene(4, (401, 401), seed))

    def test_deterministic_across_workers(self):
        scene = generate_scene(2, (256, 256), 1)
        heatmaps, kc_field = encoded(scene)
        first, _ = decode_poses(heatmaps, kc_field)
        second, _ = decode_poses(heatmaps, kc_field, workers=4)
        self.assertEqual(len(first), len(second))
        for a, b in zip(first, second):
            assert_array_equal(a.keypoint_array(), b.keypoint_array())

    def test_keycentroid_votes_beat_pixel_centroids(self):
        scene = generate_scene(1, (256, 256), 5)
        heatmaps, kc_field = encoded(scene, 8)
        person = scene.persons[0]
        errors = {}
        for use_keycentroid in (True, False):
            _, refined = decode_poses(heatmaps, kc_field, PoseDecodeConfig(radius=8, use_keycentroid=use_keycentroid))
            distances = [nearest_distance(refined, j, person.keypoints[j]) for j in range(NUM_JOINTS)]
            self.assertTrue(all(d <= 8 for d in distances))
            errors[use_keycentroid] = np.mean(distances)
        self.assertLess(errors[True], 0.5)
        self.assertLess(errors[True], errors[False])

    def test_noise_keeps_output_finite(self):
        scene = generate_scene(1, (128, 128), 6)
        heatmaps, kc_field = encoded(scene)
        noisy = perturb(heatmaps, 0.2, rng_seed=1, clip=(0.0, 1.0))
        poses, _ = decode_poses(noisy, kc_field)
        self.assertGreaterEqual(len(poses), 1)
        for pose in poses:
            self.assertTrue(np.isfinite(pose.keypoint_array()).all())


class RescoreTests(SimpleTestCase):

    def pose(self, x, score):
        joints = [RefinedKeypoint(j, SubPixel(x + j, 10.0), score, 1) for j in range(NUM_JOINTS)]
        return PersonPose(joints, score)

    def test_mean_is_identity(self):
        poses = [self.pose(0, 0.9)]
        self.assertIs(rescore(poses, 'mean')[0], poses[0])

    def test_soft_nms_discounts_duplicate(self):
        first, duplicate, distinct = self.pose(0, 0.9), self.pose(3, 0.6), self.pose(100, 0.5)
        rescored = rescore([duplicate, distinct, first], 'soft_nms')
        scores = [p.instance_score for p in rescored]
        assert_allclose(scores, [0.9, 0.0, 0.5])

    def test_unknown_mode(self):
        with self.assertRaises(ValueError):
            rescore([], 'median')


class ResultsFileTests(SimpleTestCase):

    def test_round_trip(self):
        scene = generate_scene(1, (128, 128), 3)
        poses = assemble_poses(ground_truth_keypoints(scene), COCO_SKELETON, 64)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'keypoints.json'
            payload = write_results({7: poses}, path)
            loaded = read_results(path)
        self.assertEqual(payload[0]['image_id'], 7)
        self.assertEqual(payload[0]['category_id'], 1)
        self.assertEqual(len(payload[0]['keypoints']), 51)
        assert_allclose(loaded[7][0].keypoint_array(), poses[0].keypoint_array())
