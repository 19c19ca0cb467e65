"""
Scene to training-target encoders.

Heatmaps mark a radius-R disk around every visible keypoint. KeyCentroid
targets store the displacement from each disk pixel to its keypoint, and
offset targets send every foreground pixel to its instance centroid.
"""
import logging

import numpy as np

from fields.core import DenseField, check_radius, disk_window, map_channels
from scenes.skeleton import NUM_JOINTS

from .targets import CentroidMode, EncodedTargets, KeyCentroidField, MaskCentroidSet, OffsetField

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_J = 5.0
FLOAT32_MANTISSA = 24


def _persons_by_id(scene):
    return sorted(scene.persons, key=lambda person: person.instance_id)


def encode_heatmaps(scene, radius, workers=1):
    """(17, H, W) {0, 1} field; channel j is the union of D_R over visible joints j."""
    check_radius(radius)
    persons = _persons_by_id(scene)

    def encode_joint(joint):
        plane = np.zeros((scene.height, scene.width), dtype=np.float32)
        for person in persons:
            if person.visible[joint]:
                ys, xs = disk_window(scene.height, scene.width, person.keypoints[joint], radius)
                plane[ys, xs] = 1.0
        return plane

    planes = map_channels(encode_joint, range(NUM_JOINTS), workers=workers)
    return DenseField(np.stack(planes), copy=False)


def encode_keycentroid(scene, radius, workers=1):
    """
    Displacements q - p for every pixel p inside a disk of joint j.

    Where disks of one joint overlap the pixel takes the nearest keypoint;
    exact ties keep the lower instance id.
    """
    check_radius(radius)
    persons = _persons_by_id(scene)
    height, width = scene.height, scene.width
    response_sigma = radius / 3.0

    def encode_joint(joint):
        best = np.full((height, width), np.inf)
        dx = np.zeros((height, width), dtype=np.float64)
        dy = np.zeros((height, width), dtype=np.float64)
        for person in persons:
            if not person.visible[joint]:
                continue
            qx, qy = person.keypoints[joint]
            ys, xs = disk_window(height, width, (qx, qy), radius)
            ddx = qx - xs
            ddy = qy - ys
            dist_sq = ddx * ddx + ddy * ddy
            closer = dist_sq < best[ys, xs]
            ys, xs = ys[closer], xs[closer]
            best[ys, xs] = dist_sq[closer]
            dx[ys, xs] = ddx[closer]
            dy[ys, xs] = ddy[closer]
        valid = np.isfinite(best)
        response = np.zeros((height, width), dtype=np.float64)
        response[valid] = np.exp(-best[valid] / (2.0 * response_sigma ** 2))
        return dx, dy, valid, response

    encoded = map_channels(encode_joint, range(NUM_JOINTS), workers=workers)
    base = np.empty((2 * NUM_JOINTS, height, width), dtype=np.float32)
    base[0::2] = [dx for dx, _, _, _ in encoded]
    base[1::2] = [dy for _, dy, _, _ in encoded]
    return KeyCentroidField(
        base=DenseField(base, copy=False),
        valid_mask=np.stack([valid for _, _, valid, _ in encoded]),
        response=DenseField(np.stack([r for _, _, _, r in encoded]), copy=False),
        radius=float(radius),
    )


def dynamic_centroid(person):
    """
    The visible keypoint nearest the mask mean, ties to the lower joint id;
    None when no keypoint is visible.
    """
    if not person.visible.any():
        return None
    mean = np.asarray(person.mask_mean())
    dist_sq = ((person.keypoints - mean) ** 2).sum(axis=1)
    dist_sq[~person.visible] = np.inf
    x, y = person.keypoints[int(np.argmin(dist_sq))]
    return float(x), float(y)


def instance_centroid(person, mode):
    if mode == CentroidMode.DYNAMIC:
        centroid = dynamic_centroid(person)
        if centroid is not None:
            return centroid
        logger.info('person %d has no visible keypoint; using its static centroid', person.instance_id)
    return person.mask_mean()


def centroid_grid(height, width):
    """
    Spacing of the lattice centroids are snapped to. Any multiple of it
    below twice the canvas extent fits a float32 mantissa, so both C - m and
    m + v are exact for every pixel m of the canvas.
    """
    return 2.0 ** -(FLOAT32_MANTISSA - 1 - int(max(height, width)).bit_length())


def snap_centroid(centroid, grid):
    return tuple(float(np.round(c / grid) * grid) for c in centroid)


def encode_offsets(scene, mode=CentroidMode.STATIC, sigma_j=DEFAULT_SIGMA_J):
    """
    Offsets v = C - m over each instance's owned pixels, and the centroid set.

    Centroids are snapped to ``centroid_grid`` first so that m + v
    reproduces C exactly in float32. Raises ValueError for an empty mask.
    """
    mode = CentroidMode(mode)
    if not scene.persons:
        raise ValueError('scene has no persons to encode')
    height, width = scene.height, scene.width
    owners = scene.owner_map()
    offsets = np.zeros((2, height, width), dtype=np.float32)
    grid = centroid_grid(height, width)
    ids, centroids = [], []
    for index, person in enumerate(scene.persons):
        if not person.mask.any():
            raise ValueError(f'person {person.instance_id} has an empty mask')
        cx, cy = snap_centroid(instance_centroid(person, mode), grid)
        ys, xs = np.nonzero(owners == index)
        offsets[0, ys, xs] = np.float32(cx) - xs.astype(np.float32)
        offsets[1, ys, xs] = np.float32(cy) - ys.astype(np.float32)
        ids.append(person.instance_id)
        centroids.append((cx, cy))
        logger.debug('person %d centroid (%.2f, %.2f) [%s]', person.instance_id, cx, cy, mode.value)

    centroid_set = MaskCentroidSet(
        instance_ids=ids,
        centroids=np.array(centroids),
        sigmas=[sigma_j] * len(ids),
        mode=mode,
    )
    return OffsetField(DenseField(offsets, copy=False), owners >= 0), centroid_set


def exclusion_mask(scene):
    """
    1 where pixels are trainable, 0 on the masks of persons flagged small.
    Pixels that an unflagged person also covers stay trainable.
    """
    flagged = np.zeros((scene.height, scene.width), dtype=bool)
    kept = np.zeros_like(flagged)
    for person in scene.persons:
        if person.is_small:
            flagged |= person.mask
        else:
            kept |= person.mask
    keep = ~flagged | kept
    return DenseField.from_mask(keep)


def encode_scene(scene, radius, mode=CentroidMode.STATIC, sigma_j=DEFAULT_SIGMA_J, workers=1):
    """Every training target of one scene."""
    offsets, centroids = encode_offsets(scene, mode, sigma_j)
    targets = EncodedTargets(
        heatmaps=encode_heatmaps(scene, radius, workers=workers),
        keycentroid=encode_keycentroid(scene, radius, workers=workers),
        offsets=offsets,
        centroids=centroids,
        exclusion=exclusion_mask(scene),
    )
    logger.info(
        'encoded image %d: %d persons, R=%.1f, %s centroids',
        scene.image_id, len(scene.persons), radius, CentroidMode(mode).value,
    )
    return targets
