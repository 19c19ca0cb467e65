"""
Ablation studies over seeded synthetic scenes.

Each study returns ``(rows, summary)``: one table row per setting and a
dict of derived numbers. Studies on occlusion use pairs of near congruent
figures with the second pushed behind the first.
"""
import logging
import math

import numpy as np

from evaluation.metrics import average_precision, boundary_iou, localization_errors, mask_iou
from poses.decoder import decode_poses
from scenes.generator import generate_scene, occlude_scene
from segmentation.decoder import decode_instances

from .pipeline import OCCLUDED_PAIR, OCCLUSION_JITTER, encode, noisy_inputs

logger = logging.getLogger(__name__)

STUDIES = ('radius', 'mode', 'igo', 'pgo', 'canvas')
RADII = (32.0, 16.0, 8.0)
IGO_SIGMAS = (0.1, 0.25, 0.5, 1.0)
PGO_SIGMAS = ((0.1, 0.5), (0.3, 0.7), (0.45, 0.95))
CANVASES = (201, 301, 401)
DEFAULT_OVERLAP = 0.5

# noise applied when a study runs without explicit --noise / --offset-noise
STUDY_NOISE = {
    'radius': {'noise': 0.1, 'offset_noise': 1.5},
    'mode': {'noise': 0.0, 'offset_noise': 1.5},
    'igo': {'noise': 0.0, 'offset_noise': 0.0},
    'pgo': {'noise': 0.2, 'offset_noise': 0.0},
    'canvas': {'noise': 0.0, 'offset_noise': 0.0},
}


def occluded_scenes(config, seeds):
    overlap = config.occlude or DEFAULT_OVERLAP
    scenes = []
    for index in range(seeds):
        seed = config.seed + index
        scene = generate_scene(2, (config.canvas, config.canvas), seed, shared_pose=True,
                               pose_jitter=OCCLUSION_JITTER, image_id=index + 1)
        scenes.append(occlude_scene(scene, OCCLUDED_PAIR, overlap, rng_seed=seed))
    return scenes


def _mean(values):
    values = [v for v in values if math.isfinite(v)]
    return float(np.mean(values)) if values else None


def best_overlaps(instances, scene, measure=mask_iou):
    """For each GT person, the best ``measure`` against any decoded mask."""
    masks = [instance.mask for instance in instances if instance.mask is not None]
    return [max((measure(mask, person.mask) for mask in masks), default=0.0) for person in scene.persons]


def radius_study(config, seeds=30, radii=RADII):
    """
    Refined-keypoint localization error per disk radius. The mean covers
    the joints that were found; ``missed`` counts the visible GT joints with
    no refined keypoint.
    """
    scenes = occluded_scenes(config, seeds)
    rows = []
    for radius in radii:
        errors = []
        for scene in scenes:
            targets = encode(scene, config, radius=radius)
            heatmaps, keycentroid, _ = noisy_inputs(
                targets.heatmaps, targets.keycentroid.base, targets.offsets, config, scene.image_id,
            )
            _, refined = decode_poses(heatmaps, keycentroid, config=config.pose_config(radius=radius))
            errors.extend(localization_errors(refined, scene)[1])
        errors = np.asarray(errors)
        found = np.isfinite(errors)
        rows.append({
            'radius': radius,
            'error': _mean(errors),
            'found': float(found.mean()) if errors.size else 0.0,
            'missed': int((~found).sum()),
            'joints': int(errors.size),
        })
        logger.info('radius %.0f: mean error %s over %d joints, %d missed',
                    radius, rows[-1]['error'], errors.size, rows[-1]['missed'])
    return rows, {'best_radius': min(rows, key=lambda r: math.inf if r['error'] is None else r['error'])['radius']}


def mode_study(config, seeds=30):
    """Mean mask IoU of static against dynamic MaskCentroids."""
    scenes = occluded_scenes(config, seeds)
    rows = []
    for mode in ('static', 'dynamic'):
        overlaps = []
        for scene in scenes:
            targets = encode(scene, config, mode=mode)
            _, _, offsets = noisy_inputs(
                targets.heatmaps, targets.keycentroid.base, targets.offsets, config, scene.image_id,
            )
            poses, _ = decode_poses(targets.heatmaps, targets.keycentroid, config=config.pose_config())
            instances = decode_instances(offsets, poses, config=config.seg_config(mode=mode))
            overlaps.extend(best_overlaps(instances, scene))
        rows.append({'mode': mode, 'mask_iou': _mean(overlaps), 'instances': len(overlaps)})
    margin = rows[1]['mask_iou'] - rows[0]['mask_iou']
    logger.info('dynamic minus static mask IoU: %.4f', margin)
    return rows, {'margin': margin}


def igo_study(config, seeds=30, sigmas=IGO_SIGMAS):
    """Boundary-band mask IoU per instance-wise smoothing sigma."""
    scenes = occluded_scenes(config, seeds)
    decoded = []
    for scene in scenes:
        targets = encode(scene, config)
        _, _, offsets = noisy_inputs(
            targets.heatmaps, targets.keycentroid.base, targets.offsets, config, scene.image_id,
        )
        poses, _ = decode_poses(targets.heatmaps, targets.keycentroid, config=config.pose_config())
        decoded.append((scene, offsets, poses))

    rows = []
    for sigma in sigmas:
        boundary, overall = [], []
        for scene, offsets, poses in decoded:
            instances = decode_instances(offsets, poses, config=config.seg_config(igo_sigma=sigma))
            boundary.extend(best_overlaps(instances, scene, boundary_iou))
            overall.extend(best_overlaps(instances, scene))
        rows.append({'igo_sigma': sigma, 'boundary_iou': _mean(boundary), 'mask_iou': _mean(overall)})
    return rows, {}


def pgo_study(config, seeds=30, pairs=PGO_SIGMAS):
    """Keypoint AP and localization error per (high, low) variance sigma pair."""
    scenes = occluded_scenes(config, seeds)
    inputs = []
    for scene in scenes:
        targets = encode(scene, config)
        heatmaps, keycentroid, _ = noisy_inputs(
            targets.heatmaps, targets.keycentroid.base, targets.offsets, config, scene.image_id,
        )
        inputs.append((scene, heatmaps, keycentroid))

    rows = []
    for sigma_hvk, sigma_lvk in pairs:
        results, errors = {}, []
        for scene, heatmaps, keycentroid in inputs:
            poses, refined = decode_poses(
                heatmaps, keycentroid, config=config.pose_config(sigma_hvk=sigma_hvk, sigma_lvk=sigma_lvk),
            )
            results[scene.image_id] = poses
            errors.extend(localization_errors(refined, scene)[1])
        summary = average_precision(results, scenes)
        rows.append({'sigma_hvk': sigma_hvk, 'sigma_lvk': sigma_lvk, 'AP': summary['AP'], 'error': _mean(errors)})
    return rows, {}


def canvas_study(config, seeds=30, canvases=CANVASES):
    """Round-trip keypoint and mask AP per canvas size."""
    rows = []
    for canvas in canvases:
        scenes = [
            generate_scene(config.persons, (canvas, canvas), config.seed + index, image_id=index + 1)
            for index in range(seeds)
        ]
        keypoints, masks = {}, {}
        for scene in scenes:
            targets = encode(scene, config)
            heatmaps, keycentroid, offsets = noisy_inputs(
                targets.heatmaps, targets.keycentroid.base, targets.offsets, config, scene.image_id,
            )
            poses, _ = decode_poses(heatmaps, keycentroid, config=config.pose_config())
            keypoints[scene.image_id] = poses
            masks[scene.image_id] = decode_instances(offsets, poses, config=config.seg_config())
        rows.append({
            'canvas': canvas,
            'keypoint_AP': average_precision(keypoints, scenes)['AP'],
            'mask_AP': average_precision(masks, scenes, 'segm')['AP'],
        })
    return rows, {}


def run_study(study, config, seeds=30):
    runners = {
        'radius': radius_study,
        'mode': mode_study,
        'igo': igo_study,
        'pgo': pgo_study,
        'canvas': canvas_study,
    }
    if study not in runners:
        raise ValueError(f'unknown study {study!r}; choose from {", ".join(STUDIES)}')
    if seeds < 1:
        raise ValueError(f'seeds must be at least 1, got {seeds}')
    return runners[study](config, seeds)
