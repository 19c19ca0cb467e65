import csv
import math
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from fields.core import SubPixel
from poses.keypoints import PersonPose, RefinedKeypoint
from scenes.generator import generate_scene
from scenes.scene import PersonGT, Scene
from scenes.skeleton import NUM_JOINTS
from segmentation.instances import InstanceResult

from .metrics import (
    DEFAULT_KAPPAS,
    EvalConfig,
    MetricError,
    average_precision,
    boundary_iou,
    joint_confidences,
    localization_errors,
    mask_iou,
    oks,
    read_metrics,
    write_metrics,
    write_table,
)


def square_mask(x, y, size=10, shape=(40, 40)):
    mask = np.zeros(shape, dtype=bool)
    mask[y:y + size, x:x + size] = True
    return mask


def person_with(visible=None, area_mask=None, keypoints=None, instance_id=1):
    keypoints = np.tile([20.0, 20.0], (NUM_JOINTS, 1)) if keypoints is None else keypoints
    visible = np.ones(NUM_JOINTS, dtype=bool) if visible is None else visible
    mask = square_mask(15, 15) if area_mask is None else area_mask
    return PersonGT(instance_id, keypoints, visible, mask)


def pose_on(person, score=0.9, shift=(0.0, 0.0)):
    joints = [
        RefinedKeypoint(j, SubPixel(float(x) + shift[0], float(y) + shift[1]), score, 1)
        for j, (x, y) in enumerate(person.keypoints)
    ]
    return PersonPose(joints, score)


def perfect_results(scenes):
    return {scene.image_id: [pose_on(p, 0.9 - 0.1 * i) for i, p in enumerate(scene.persons)] for scene in scenes}


class OKSTests(SimpleTestCase):

    def test_exact_pose(self):
        person = person_with()
        self.assertEqual(oks(pose_on(person), person), 1.0)

    def test_far_pose(self):
        person = person_with()
        self.assertEqual(oks(pose_on(person, shift=(1e6, 0.0)), person), 0.0)

    def test_single_visible_joint(self):
        visible = np.zeros(NUM_JOINTS, dtype=bool)
        visible[0] = True
        person = person_with(visible)
        d = math.sqrt(2 * person.area * DEFAULT_KAPPAS[0] ** 2)
        assert_allclose(oks(pose_on(person, shift=(d, 0.0)), person), math.exp(-1), rtol=1e-12)
        self.assertAlmostEqual(math.exp(-1), 0.367879, places=6)

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        keypoints = rng.uniform(10, 30, size=(NUM_JOINTS, 2))
        person = person_with(keypoints=keypoints)
        moved = person_with(keypoints=keypoints + (3.5, -2.0))
        shift = (1.0, 0.5)
        assert_allclose(
            oks(pose_on(person, shift=shift), person),
            oks(pose_on(moved, shift=shift), moved),
            rtol=1e-12,
        )

    def test_missing_joint_scores_zero(self):
        visible = np.zeros(NUM_JOINTS, dtype=bool)
        visible[[0, 5]] = True
        person = person_with(visible)
        joints = list(pose_on(person).joints)
        joints[5] = None
        self.assertEqual(oks(PersonPose(joints, 0.9), person), 0.5)

    def test_undefined_cases(self):
        with self.assertRaises(MetricError):
            person = person_with(np.zeros(NUM_JOINTS, dtype=bool))
            oks(pose_on(person), person)
        with self.assertRaises(ValueError):
            person = person_with()
            oks(pose_on(person), person, area=0)


class MaskIoUTests(SimpleTestCase):

    def test_identical(self):
        self.assertEqual(mask_iou(square_mask(5, 5), square_mask(5, 5)), 1.0)

    def test_disjoint(self):
        self.assertEqual(mask_iou(square_mask(0, 0), square_mask(20, 20)), 0.0)

    def test_shifted_square(self):
        assert_allclose(mask_iou(square_mask(5, 5), square_mask(10, 5)), 50 / 150)

    def test_empty_union(self):
        empty = np.zeros((4, 4), dtype=bool)
        self.assertEqual(mask_iou(empty, empty), 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            mask_iou(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_boundary_iou_is_stricter(self):
        a, b = square_mask(5, 5, 20), square_mask(6, 5, 20)
        self.assertEqual(boundary_iou(a, a), 1.0)
        self.assertLess(boundary_iou(a, b), mask_iou(a, b))


class AveragePrecisionTests(SimpleTestCase):

    def setUp(self):
        self.scenes = [generate_scene(2, (160, 160), seed, image_id=seed + 1) for seed in range(3)]

    def single(self):
        person = person_with()
        return [Scene(40, 40, [person], image_id=1)], person

    def test_perfect_keypoints(self):
        summary = average_precision(perfect_results(self.scenes), self.scenes)
        self.assertEqual(summary['AP'], 1.0)
        self.assertEqual(summary['AP50'], 1.0)
        self.assertEqual(summary['AP75'], 1.0)
        self.assertTrue(all(v == 1.0 for v in summary['per_threshold'].values()))

    def test_perfect_masks(self):
        results = {
            scene.image_id: [InstanceResult(None, p.mask, None, 0.5) for p in scene.persons]
            for scene in self.scenes
        }
        summary = average_precision(results, self.scenes, 'segm')
        self.assertEqual(summary['AP'], 1.0)

    def test_no_predictions(self):
        self.assertEqual(average_precision({}, self.scenes)['AP'], 0.0)

    def test_duplicate_after_true_positive(self):
        scenes, person = self.single()
        summary = average_precision({1: [pose_on(person, 0.9), pose_on(person, 0.8)]}, scenes)
        self.assertEqual(summary['AP'], 1.0)

    def test_false_positive_first(self):
        scenes, person = self.single()
        results = {1: [pose_on(person, 0.9, shift=(500.0, 0.0)), pose_on(person, 0.8)]}
        self.assertEqual(average_precision(results, scenes)['AP'], 0.5)

    def test_hand_computed_curve(self):
        first = person_with(instance_id=1)
        second = person_with(keypoints=np.tile([60.0, 60.0], (NUM_JOINTS, 1)), instance_id=2)
        scenes = [Scene(80, 80, [first, second], image_id=1)]
        results = {1: [pose_on(first, 0.9), pose_on(first, 0.8, shift=(300.0, 0.0)), pose_on(second, 0.7)]}
        expected = (51 * 1.0 + 50 * (2.0 / 3.0)) / 101
        assert_allclose(average_precision(results, scenes)['AP'], expected, rtol=1e-12)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        results = {
            scene.image_id: [pose_on(p, 0.9, shift=tuple(rng.normal(0, 2.0, 2))) for p in scene.persons]
            for scene in self.scenes
        }
        values = list(average_precision(results, self.scenes)['per_threshold'].values())
        self.assertTrue(all(b <= a for a, b in zip(values, values[1:])))

    def test_ignored_ground_truth(self):
        scenes, person = self.single()
        small = replace(person_with(keypoints=np.tile([30.0, 30.0], (NUM_JOINTS, 1)), instance_id=2), is_small=True)
        scenes = [Scene(40, 40, [person, small], image_id=1)]
        results = {1: [pose_on(small, 0.95), pose_on(person, 0.9)]}
        self.assertEqual(average_precision(results, scenes)['AP'], 1.0)

    def test_no_ground_truth(self):
        with self.assertRaises(MetricError):
            average_precision({}, [Scene(40, 40, [], image_id=1)])

    def test_occlusion_splits(self):
        scenes, person = self.single()
        hidden = Scene(40, 40, [replace(person, occlusion=0.7)], image_id=2)
        summary = average_precision({1: [pose_on(person)], 2: []}, scenes + [hidden])
        self.assertEqual(summary['AP_E'], 1.0)
        self.assertIsNone(summary['AP_M'])
        self.assertEqual(summary['AP_H'], 0.0)

    def test_unknown_iou_type(self):
        with self.assertRaises(ValueError):
            average_precision({}, self.scenes, 'bbox')


class EvalConfigTests(SimpleTestCase):

    def test_split_bounds(self):
        config = EvalConfig()
        self.assertEqual([config.split_of(o) for o in (0.0, 0.29, 0.3, 0.6, 0.61)], ['E', 'E', 'M', 'M', 'H'])

    def test_validation(self):
        with self.assertRaises(ValueError):
            EvalConfig(oks_kappas=(0.1,) * 5)
        with self.assertRaises(ValueError):
            EvalConfig(iou_thresholds=(0.75, 0.5))
        with self.assertRaises(ValueError):
            EvalConfig(iou_thresholds=(0.5, 1.0))


class LocalizationTests(SimpleTestCase):

    def test_errors_per_visible_joint(self):
        visible = np.ones(NUM_JOINTS, dtype=bool)
        visible[3] = False
        person = person_with(visible)
        refined = [kp for kp in pose_on(person, shift=(3.0, 4.0)).joints if kp.joint != 7]
        joints, errors = localization_errors(refined, Scene(40, 40, [person]))
        self.assertEqual(len(joints), NUM_JOINTS - 1)
        self.assertTrue(math.isinf(errors[list(joints).index(7)]))
        finite = errors[np.isfinite(errors)]
        assert_allclose(finite, 5.0)

    def test_joint_confidences(self):
        refined = [RefinedKeypoint(2, SubPixel(0.0, 0.0), c, 1) for c in (0.4, 0.8)]
        report = joint_confidences(refined)
        assert_allclose(report[2], 0.6)
        self.assertIsNone(report[0])


class MetricsFileTests(SimpleTestCase):

    def test_metrics_json(self):
        metrics = {'AP': 0.5, 'AP_M': None}
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'metrics.json'
            write_metrics(metrics, path)
            self.assertEqual(read_metrics(path), metrics)

    def test_table_csv(self):
        rows = [{'radius': 32, 'AP': 1.0}, {'radius': 8, 'AP': 0.75, 'AP_M': None}]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'ablation.csv'
            write_table(rows, path)
            with path.open(newline='') as handle:
                loaded = list(csv.DictReader(handle))
        self.assertEqual(list(loaded[0]), ['radius', 'AP', 'AP_M'])
        self.assertEqual(loaded[1], {'radius': '8', 'AP': '0.75', 'AP_M': ''})
