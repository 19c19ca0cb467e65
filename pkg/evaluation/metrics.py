"""
Keypoint and mask average precision on synthetic datasets.

Matching follows the COCO protocol: detections are taken by descending score,
each ground truth is matched at most once, detections matched to ignored
ground truths are themselves ignored, and precision is read off a 101-point
recall grid after the usual monotone envelope. Images are additionally split
by their worst person occlusion into easy, medium and hard.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from fields.core import map_channels
from scenes.skeleton import NUM_JOINTS

logger = logging.getLogger(__name__)

# COCO per-keypoint standard deviations
COCO_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)
DEFAULT_KAPPAS = tuple(2.0 * s for s in COCO_SIGMAS)
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_THRESHOLDS = np.arange(101) / 100.0
OCCLUSION_BOUNDS = (0.3, 0.6)
SPLIT_NAMES = ('E', 'M', 'H')
AREA_RANGES = {
    'all': (0.0, math.inf),
    'medium': (32.0 ** 2, 96.0 ** 2),
    'large': (96.0 ** 2, math.inf),
}


class MetricError(ValueError):
    """Raised when a metric is undefined for its input."""


@dataclass(frozen=True)
class EvalConfig:
    oks_kappas: tuple = DEFAULT_KAPPAS
    iou_thresholds: tuple = IOU_THRESHOLDS
    occlusion_bounds: tuple = OCCLUSION_BOUNDS
    max_detections: int = 20
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'oks_kappas', tuple(float(k) for k in self.oks_kappas))
        object.__setattr__(self, 'iou_thresholds', tuple(float(t) for t in self.iou_thresholds))
        object.__setattr__(self, 'occlusion_bounds', tuple(float(b) for b in self.occlusion_bounds))
        if len(self.oks_kappas) != NUM_JOINTS or any(not k > 0 for k in self.oks_kappas):
            raise ValueError(f'oks_kappas needs {NUM_JOINTS} positive values')
        thresholds = self.iou_thresholds
        if not thresholds or any(not 0.0 < t < 1.0 for t in thresholds):
            raise ValueError('iou_thresholds must lie in (0, 1)')
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError('iou_thresholds must be strictly increasing')
        low, high = self.occlusion_bounds
        if not 0.0 <= low <= high <= 1.0:
            raise ValueError(f'occlusion_bounds must satisfy 0 <= low <= high <= 1, got {self.occlusion_bounds}')
        if self.max_detections < 1:
            raise ValueError('max_detections must be at least 1')

    def split_of(self, occlusion):
        """'E' below the low bound, 'M' up to the high bound inclusive, else 'H'."""
        low, high = self.occlusion_bounds
        if occlusion < low:
            return 'E'
        if occlusion <= high:
            return 'M'
        return 'H'


def oks(pred, gt, area=None, kappas=DEFAULT_KAPPAS):
    """
    Object keypoint similarity: the mean over visible GT joints of
    exp(-d^2 / (2 area kappa_j^2)). A joint the pose lacks scores 0.
    """
    area = gt.area if area is None else area
    if not area > 0:
        raise ValueError(f'area must be positive, got {area}')
    visible = np.flatnonzero(gt.visible)
    if visible.size == 0:
        raise MetricError(f'person {gt.instance_id} has no visible joints')
    total = 0.0
    for joint in visible:
        kp = pred.joints[joint]
        if kp is None:
            continue
        gx, gy = gt.keypoints[joint]
        dist_sq = (kp.position.x - gx) ** 2 + (kp.position.y - gy) ** 2
        total += math.exp(-dist_sq / (2.0 * area * kappas[joint] ** 2))
    return total / visible.size


def mask_iou(a, b):
    """|a & b| / |a | b|, 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f'mask shapes differ: {a.shape} vs {b.shape}')
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _inner_band(mask, width):
    eroded = ndimage.binary_erosion(mask, iterations=width, border_value=0)
    return mask & ~eroded


def boundary_iou(pred, gt, width=2):
    """Mask IoU restricted to the bands within ``width`` px inside each boundary."""
    if width < 1:
        raise ValueError(f'width must be at least 1, got {width}')
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    return mask_iou(_inner_band(pred, width), _inner_band(gt, width))


def pose_area(pose):
    """Area of the box spanned by the present joints."""
    points = np.array([tuple(kp.position) for kp in pose.present()])
    width, height = points.max(axis=0) - points.min(axis=0)
    return float(width * height)


class ImageEval(NamedTuple):
    scores: np.ndarray
    matched: np.ndarray
    dt_ignore: np.ndarray
    gt_ignore: np.ndarray


def evaluate_image(similarity, dt_scores, dt_areas, gt_areas, gt_flags, thresholds, area_range, max_detections):
    """
    Greedy COCO matching of one image at every threshold.

    ``similarity`` is (detections, ground truths); ``gt_flags`` marks ground
    truths that are ignored whatever the area range.
    """
    low, high = area_range
    gt_areas = np.asarray(gt_areas, dtype=np.float64)
    gt_ignore = np.asarray(gt_flags, dtype=bool) | (gt_areas < low) | (gt_areas > high)
    gt_order = np.argsort(gt_ignore, kind='mergesort')
    gt_ignore = gt_ignore[gt_order]
    dt_order = np.argsort(-np.asarray(dt_scores, dtype=np.float64), kind='mergesort')[:max_detections]
    scores = np.asarray(dt_scores, dtype=np.float64)[dt_order]
    dt_areas = np.asarray(dt_areas, dtype=np.float64)[dt_order]
    similarity = np.asarray(similarity, dtype=np.float64).reshape(len(dt_scores), len(gt_flags))
    similarity = similarity[dt_order][:, gt_order]

    count = len(thresholds)
    matched = np.zeros((count, scores.size), dtype=bool)
    dt_ignore = np.zeros((count, scores.size), dtype=bool)
    for t, threshold in enumerate(thresholds):
        gt_taken = np.zeros(gt_ignore.size, dtype=bool)
        for d in range(scores.size):
            best_value = min(threshold, 1.0 - 1e-10)
            best = -1
            for g in range(gt_ignore.size):
                if gt_taken[g]:
                    continue
                if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                    break
                if similarity[d, g] < best_value:
                    continue
                best_value = similarity[d, g]
                best = g
            if best == -1:
                continue
            gt_taken[best] = True
            matched[t, d] = True
            dt_ignore[t, d] = gt_ignore[best]
    outside = (dt_areas < low) | (dt_areas > high)
    dt_ignore |= ~matched & outside[np.newaxis]
    return ImageEval(scores, matched, dt_ignore, gt_ignore)


def accumulate(evals, num_thresholds):
    """AP per threshold over a set of images, or None without ground truth."""
    num_gt = sum(int(np.count_nonzero(~e.gt_ignore)) for e in evals)
    if num_gt == 0:
        return None
    if not evals:
        return np.zeros(num_thresholds)
    scores = np.concatenate([e.scores for e in evals])
    order = np.argsort(-scores, kind='mergesort')
    matched = np.concatenate([e.matched for e in evals], axis=1)[:, order]
    ignored = np.concatenate([e.dt_ignore for e in evals], axis=1)[:, order]
    tp_sum = np.cumsum(matched & ~ignored, axis=1).astype(np.float64)
    fp_sum = np.cumsum(~matched & ~ignored, axis=1).astype(np.float64)

    ap = np.zeros(num_thresholds)
    for t in range(num_thresholds):
        tp, fp = tp_sum[t], fp_sum[t]
        if tp.size == 0:
            continue
        recall = tp / num_gt
        seen = tp + fp
        precision = np.divide(tp, seen, out=np.zeros_like(tp), where=seen > 0)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        index = np.searchsorted(recall, RECALL_THRESHOLDS, side='left')
        found = index < recall.size
        q = np.zeros(RECALL_THRESHOLDS.size)
        q[found] = envelope[index[found]]
        ap[t] = q.mean()
    return ap


def keypoint_similarity(poses, persons, kappas=DEFAULT_KAPPAS):
    """(poses, persons) OKS matrix, plus the persons that cannot be scored."""
    unscorable = np.array([not person.visible.any() or person.area == 0 for person in persons], dtype=bool)
    matrix = np.zeros((len(poses), len(persons)))
    for g, person in enumerate(persons):
        if unscorable[g]:
            continue
        for d, pose in enumerate(poses):
            matrix[d, g] = oks(pose, person, kappas=kappas)
    return matrix, unscorable


def mask_similarity(instances, persons):
    matrix = np.zeros((len(instances), len(persons)))
    for d, instance in enumerate(instances):
        for g, person in enumerate(persons):
            matrix[d, g] = mask_iou(instance.mask, person.mask)
    return matrix, np.zeros(len(persons), dtype=bool)


def _image_inputs(iou_type, detections, scene, config):
    persons = scene.persons
    if iou_type == 'keypoints':
        similarity, unscorable = keypoint_similarity(detections, persons, config.oks_kappas)
        scores = [pose.instance_score for pose in detections]
        areas = [pose_area(pose) for pose in detections]
    else:
        detections = [d for d in detections if d.mask is not None]
        similarity, unscorable = mask_similarity(detections, persons)
        scores = [d.score for d in detections]
        areas = [d.area for d in detections]
    flags = unscorable | np.array([p.is_small for p in persons], dtype=bool)
    return similarity, scores, areas, [p.area for p in persons], flags


def _summary_value(ap):
    return None if ap is None else float(np.mean(ap))


def average_precision(results_by_image, scenes, iou_type='keypoints', config=None):
    """
    COCO-style AP summary.

    ``results_by_image`` maps image id to poses (``iou_type='keypoints'``)
    or to InstanceResults (``'segm'``). Returns AP, AP50, AP75, APm, APl,
    the occlusion splits AP_E, AP_M, AP_H (None for a split without images)
    and AP per threshold. Raises MetricError when no ground truth counts.
    """
    if iou_type not in ('keypoints', 'segm'):
        raise ValueError(f'unknown iou_type {iou_type!r}')
    config = config or EvalConfig()
    thresholds = config.iou_thresholds
    known = {scene.image_id for scene in scenes}
    for image_id in set(results_by_image) - known:
        logger.warning('results for unknown image %s are ignored', image_id)

    def per_image(scene):
        inputs = _image_inputs(iou_type, list(results_by_image.get(scene.image_id, ())), scene, config)
        similarity, scores, dt_areas, gt_areas, flags = inputs
        return {
            name: evaluate_image(similarity, scores, dt_areas, gt_areas, flags, thresholds, area_range,
                                 config.max_detections)
            for name, area_range in AREA_RANGES.items()
        }

    evaluated = map_channels(per_image, scenes, workers=config.workers)
    overall = accumulate([e['all'] for e in evaluated], len(thresholds))
    if overall is None:
        raise MetricError('no ground-truth instances to evaluate against')

    def at(value):
        index = [i for i, t in enumerate(thresholds) if math.isclose(t, value)]
        return float(overall[index[0]]) if index else None

    summary = {
        'iou_type': iou_type,
        'AP': float(overall.mean()),
        'AP50': at(0.5),
        'AP75': at(0.75),
        'APm': _summary_value(accumulate([e['medium'] for e in evaluated], len(thresholds))),
        'APl': _summary_value(accumulate([e['large'] for e in evaluated], len(thresholds))),
        'per_threshold': {f'{t:.2f}': float(v) for t, v in zip(thresholds, overall)},
        'num_images': len(scenes),
    }
    for split in SPLIT_NAMES:
        members = [e['all'] for scene, e in zip(scenes, evaluated) if config.split_of(scene.max_occlusion) == split]
        summary[f'AP_{split}'] = _summary_value(accumulate(members, len(thresholds))) if members else None
    logger.info('%s AP %.4f over %d images', iou_type, summary['AP'], len(scenes))
    return summary


def localization_errors(refined, scene):
    """
    (joints, errors): for every visible GT joint, the distance to the
    nearest refined keypoint of that joint, inf when there is none.
    """
    joints, errors = [], []
    for person in scene.persons:
        for joint in np.flatnonzero(person.visible):
            gx, gy = person.keypoints[joint]
            distances = [math.hypot(kp.position.x - gx, kp.position.y - gy) for kp in refined if kp.joint == joint]
            joints.append(int(joint))
            errors.append(min(distances, default=math.inf))
    return np.array(joints, dtype=np.intp), np.array(errors, dtype=np.float64)


def joint_confidences(refined):
    """Mean refined confidence per joint, None for joints never found."""
    report = []
    for joint in range(NUM_JOINTS):
        values = [kp.confidence for kp in refined if kp.joint == joint]
        report.append(float(np.mean(values)) if values else None)
    return report


def write_metrics(metrics, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True))


def read_metrics(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f'{path} is not valid JSON: {exc}') from exc


def write_table(rows, path):
    """CSV with the union of row keys as header, in first-seen order."""
    fieldnames = []
    for row in rows:
        fieldnames += [key for key in row if key not in fieldnames]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: '' if value is None else value for key, value in row.items()})
