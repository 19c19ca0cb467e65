import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal
from scipy import ndimage

from .coco import decode_rle, encode_rle, read_dataset, scenes_to_coco, write_dataset
from .generator import generate_dataset, generate_scene, occlude_scene
from .skeleton import COCO_SKELETON, JOINT_NAMES, NUM_JOINTS, Skeleton, VarianceClass


def visible_inside_mask(person):
    for (x, y), visible in zip(person.keypoints, person.visible):
        if visible and not person.mask[int(round(y)), int(round(x))]:
            return False
    return True


def occluded_pair(seed, fraction):
    scene = generate_scene(2, (401, 401), seed, shared_pose=True, pose_jitter=0.05)
    return occlude_scene(scene, (1, 2), fraction, rng_seed=seed)


class SkeletonTests(SimpleTestCase):

    def test_tree_over_seventeen_joints(self):
        self.assertEqual(COCO_SKELETON.num_joints, 17)
        self.assertEqual(len(COCO_SKELETON.edges), 16)

    def test_walk_reaches_every_joint(self):
        children = {child for _, child in COCO_SKELETON.walk(9)}
        self.assertEqual(children | {9}, set(range(NUM_JOINTS)))

    def test_variance_classes(self):
        for name in ('left_wrist', 'right_ankle', 'left_elbow', 'right_knee'):
            self.assertTrue(COCO_SKELETON.is_high_variance(JOINT_NAMES.index(name)))
        for name in ('nose', 'left_shoulder', 'right_hip', 'left_eye', 'right_ear'):
            self.assertFalse(COCO_SKELETON.is_high_variance(JOINT_NAMES.index(name)))

    def test_sigmas(self):
        sigmas = COCO_SKELETON.sigmas(0.3, 0.7)
        self.assertEqual(sigmas[JOINT_NAMES.index('left_wrist')], 0.3)
        self.assertEqual(sigmas[JOINT_NAMES.index('left_shoulder')], 0.7)

    def test_disconnected_edges_rejected(self):
        with self.assertRaises(ValueError):
            Skeleton(
                joint_names=('a', 'b', 'c'),
                edges=((0, 1), (0, 1)),
                variance=(VarianceClass.LVK,) * 3,
            )


class GenerateSceneTests(SimpleTestCase):

    def test_deterministic(self):
        first = generate_scene(1, (128, 128), 7)
        second = generate_scene(1, (128, 128), 7)
        self.assertEqual(first.persons[0].mask.tobytes(), second.persons[0].mask.tobytes())
        self.assertEqual(first.persons[0].keypoints.tobytes(), second.persons[0].keypoints.tobytes())

    def test_different_seeds_differ(self):
        first = generate_scene(1, (128, 128), 7)
        second = generate_scene(1, (128, 128), 8)
        self.assertFalse(np.array_equal(first.persons[0].keypoints, second.persons[0].keypoints))

    def test_masks_are_single_components(self):
        scene = generate_scene(3, (256, 256), 1)
        self.assertEqual(len(scene.persons), 3)
        for person in scene.persons:
            _, count = ndimage.label(person.mask)
            self.assertEqual(count, 1)

    def test_visible_keypoints_inside_masks(self):
        scene = generate_scene(2, (128, 128), 5)
        for person in scene.persons:
            self.assertTrue(visible_inside_mask(person))

    def test_keypoints_inside_canvas(self):
        scene = generate_scene(4, (401, 401), 11)
        for person in scene.persons:
            self.assertTrue((person.keypoints >= 0).all())
            self.assertTrue((person.keypoints[:, 0] <= 400).all())
            self.assertTrue((person.keypoints[:, 1] <= 400).all())

    def test_persons_are_disjoint(self):
        scene = generate_scene(4, (401, 401), 3)
        coverage = sum(p.mask.astype(int) for p in scene.persons)
        self.assertLessEqual(coverage.max(), 1)

    def test_min_area_flags_small_persons(self):
        scene = generate_scene(1, (128, 128), 2, min_area=10 ** 6)
        self.assertTrue(scene.persons[0].is_small)
        self.assertFalse(generate_scene(1, (128, 128), 2).persons[0].is_small)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            generate_scene(0, (128, 128), 0)
        with self.assertRaises(ValueError):
            generate_scene(1, (32, 128), 0)
        with self.assertRaises(ValueError):
            generate_scene(1, (64, 64), 0, person_height=140)

    def test_dataset_image_ids(self):
        scenes = generate_dataset(3, (1, 2), (128, 128), rng_seed=4)
        self.assertEqual([s.image_id for s in scenes], [1, 2, 3])
        again = generate_dataset(3, (1, 2), (128, 128), rng_seed=4)
        self.assertEqual([len(s.persons) for s in scenes], [len(s.persons) for s in again])


class OccludeSceneTests(SimpleTestCase):

    def test_zero_overlap_keeps_masks_disjoint(self):
        scene = generate_scene(2, (401, 401), 6, shared_pose=True, pose_jitter=0.05)
        occluded = occlude_scene(scene, (1, 2), 0.0)
        self.assertEqual(occluded.achieved_overlap, 0.0)
        self.assertFalse((occluded.persons[0].mask & occluded.persons[1].mask).any())
        assert_array_equal(occluded.persons[1].mask, scene.persons[1].mask)
        self.assertEqual(occluded.persons[1].num_visible, NUM_JOINTS)

    def test_seventy_percent_overlap(self):
        for seed in range(3):
            occluded = occluded_pair(seed, 0.7)
            self.assertGreaterEqual(occluded.achieved_overlap, 0.7)

    def test_masks_partition_foreground(self):
        occluded = occluded_pair(1, 0.7)
        coverage = sum(p.mask.astype(int) for p in occluded.persons)
        self.assertLessEqual(coverage.max(), 1)
        for person in occluded.persons:
            _, count = ndimage.label(person.mask)
            self.assertEqual(count, 1)

    def test_visible_keypoints_stay_on_own_mask(self):
        occluded = occluded_pair(2, 0.7)
        for person in occluded.persons:
            self.assertTrue(visible_inside_mask(person))

    def test_visibility_non_increasing_in_overlap(self):
        for seed in range(3):
            loose = occluded_pair(seed, 0.0)
            tight = occluded_pair(seed, 0.7)
            self.assertLessEqual(tight.person(2).num_visible, loose.person(2).num_visible)

    def test_occlusion_records_hidden_fraction(self):
        occluded = occluded_pair(0, 0.7)
        self.assertGreater(occluded.person(2).occlusion, 0.5)
        self.assertEqual(occluded.person(1).occlusion, 0.0)
        self.assertGreater(occluded.max_occlusion, 0.5)

    def test_unreachable_overlap_reports_best(self):
        scene = generate_scene(2, (401, 401), 3)
        with self.assertLogs('scenes.generator', level='WARNING'):
            occluded = occlude_scene(scene, (1, 2), 1.0)
        self.assertLess(occluded.achieved_overlap, 1.0)

    def test_invalid_pairs(self):
        scene = generate_scene(2, (256, 256), 0)
        with self.assertRaises(ValueError):
            occlude_scene(scene, (1, 1), 0.5)
        with self.assertRaises(ValueError):
            occlude_scene(scene, (1, 9), 0.5)
        with self.assertRaises(ValueError):
            occlude_scene(scene, (1, 2), 1.5)


class RLETests(SimpleTestCase):

    def test_column_major_counts(self):
        mask = np.array([[0, 1], [1, 1]], dtype=bool)
        self.assertEqual(encode_rle(mask), {'size': [2, 2], 'counts': [1, 3]})

    def test_leading_foreground_starts_with_empty_run(self):
        mask = np.array([[1, 0], [0, 0]], dtype=bool)
        self.assertEqual(encode_rle(mask)['counts'], [0, 1, 3])

    def test_decode_inverts_encode(self):
        mask = generate_scene(1, (128, 128), 3).persons[0].mask
        assert_array_equal(decode_rle(encode_rle(mask)), mask)

    def test_bad_counts(self):
        with self.assertRaises(ValueError):
            decode_rle({'size': [2, 2], 'counts': [1, 1]})


class DatasetFileTests(SimpleTestCase):

    def test_write_and_read(self):
        scene = occluded_pair(0, 0.7)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'gt.json'
            write_dataset([scene], path)
            (loaded,) = read_dataset(path)
        self.assertEqual(loaded.achieved_overlap, scene.achieved_overlap)
        for original, restored in zip(scene.persons, loaded.persons):
            assert_array_equal(restored.mask, original.mask)
            assert_array_equal(restored.visible, original.visible)
            assert_array_equal(restored.keypoints, original.keypoints)
            self.assertEqual(restored.occlusion, original.occlusion)

    def test_annotation_fields(self):
        scene = generate_scene(1, (128, 128), 1, min_area=10 ** 6)
        (annotation,) = scenes_to_coco([scene])['annotations']
        self.assertEqual(len(annotation['keypoints']), 3 * NUM_JOINTS)
        self.assertEqual(set(annotation['keypoints'][2::3]), {2})
        self.assertEqual(annotation['ignore'], 1)
        self.assertEqual(annotation['area'], scene.persons[0].area)

    def test_rejects_non_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'broken.json'
            path.write_text('{not json')
            with self.assertRaises(ValueError):
                read_dataset(path)
