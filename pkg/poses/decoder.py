"""
Heatmap + KeyCentroid decoding into person poses.

The pipeline smooths each joint heatmap with its variance-class Gaussian,
extracts thresholded local maxima in a global priority order, refines every
surviving candidate by aggregating KeyCentroid votes, and grows poses
greedily along the kinematic tree.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from fields.core import DenseField, GridPoint, SubPixel, bilinear_sample, check_radius, disk_window, map_channels
from fields.kernels import smooth_gaussian
from scenes.skeleton import COCO_SKELETON

from .keypoints import KeypointCandidate, PersonPose, RefinedKeypoint

logger = logging.getLogger(__name__)

SIGMA_HVK_RANGE = (0.1, 0.5)
SIGMA_LVK_RANGE = (0.5, 1.0)
REFINE_STEPS = 10
REFINE_TOL = 1e-3
SOFT_NMS_RADIUS = 10.0

# 8-neighbourhood shifts that precede a pixel in raster order, then those after it
_EARLIER = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
_LATER = ((0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class PoseDecodeConfig:
    radius: float = 32.0
    sigma_hvk: float = 0.3
    sigma_lvk: float = 0.7
    threshold: float = 0.5
    nms_radius: float = 10.0
    vote_radius: float = None
    link_radius: float = None
    use_keycentroid: bool = True
    score_mode: str = 'mean'
    smooth: bool = True
    workers: int = 1
    min_cluster_votes: int = None

    @property
    def effective_vote_radius(self):
        return self.vote_radius if self.vote_radius is not None else self.nms_radius

    @property
    def effective_link_radius(self):
        return self.link_radius if self.link_radius is not None else 2.0 * self.radius

    @property
    def effective_min_cluster_votes(self):
        """Votes a peakless cluster needs: 5% of the disk area unless set."""
        if self.min_cluster_votes is not None:
            return self.min_cluster_votes
        return max(3, int(0.05 * math.pi * self.radius * self.radius))


def pgo_smooth(heatmaps, skeleton=COCO_SKELETON, sigma_hvk=0.3, sigma_lvk=0.7, workers=1):
    """Smooth each joint channel with the sigma of its variance class."""
    low, high = SIGMA_HVK_RANGE
    if not low <= sigma_hvk < high:
        raise ValueError(f'sigma_hvk must lie in [{low}, {high}), got {sigma_hvk}')
    low, high = SIGMA_LVK_RANGE
    if not low <= sigma_lvk < high:
        raise ValueError(f'sigma_lvk must lie in [{low}, {high}), got {sigma_lvk}')
    if heatmaps.channels != skeleton.num_joints:
        raise ValueError(f'expected {skeleton.num_joints} heatmap channels, got {heatmaps.channels}')
    return smooth_gaussian(heatmaps, skeleton.sigmas(sigma_hvk, sigma_lvk), workers=workers)


def local_maxima(plane, threshold):
    """
    (ys, xs) of pixels at or above ``threshold`` that beat their 8
    neighbours, with equal scores ordered by (y, x): a tied neighbour earlier
    in raster order wins. A flat plateau therefore yields only pixels on its
    upper-left rim.
    """
    plane = np.asarray(plane, dtype=np.float32)
    ys, xs = np.nonzero(plane >= threshold)
    if ys.size == 0:
        return ys, xs
    padded = np.pad(plane, 1, mode='constant', constant_values=-np.inf)
    values = plane[ys, xs]
    peaks = np.ones(ys.size, dtype=bool)
    for dy, dx in _EARLIER:
        peaks &= values > padded[ys + 1 + dy, xs + 1 + dx]
    for dy, dx in _LATER:
        peaks &= values >= padded[ys + 1 + dy, xs + 1 + dx]
    return ys[peaks], xs[peaks]


def suppress(candidates, nms_radius):
    """
    Greedy non-maximum suppression per joint over candidates already in
    priority order.
    """
    radius_sq = nms_radius * nms_radius
    kept = []
    by_joint = {}
    for candidate in candidates:
        x, y = candidate.position
        others = by_joint.setdefault(candidate.joint, [])
        if any((x - ox) ** 2 + (y - oy) ** 2 <= radius_sq for ox, oy in others):
            continue
        others.append((x, y))
        kept.append(candidate)
    return kept


def _priority(candidate):
    return (-candidate.raw_score, candidate.position.y, candidate.position.x, candidate.joint)


def extract_candidates(heatmaps, threshold=0.5, nms_radius=10.0, workers=1):
    """
    Thresholded local maxima of every channel after per-joint greedy NMS,
    sorted by score descending with ties in (y, x) order.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f'threshold must lie in (0, 1), got {threshold}')
    check_radius(nms_radius, 'nms_radius')

    def channel_candidates(joint):
        plane = heatmaps.channel(joint)
        ys, xs = local_maxima(plane, threshold)
        found = [
            KeypointCandidate(joint, GridPoint(int(x), int(y)), float(plane[y, x]))
            for y, x in zip(ys, xs)
        ]
        found.sort(key=_priority)
        return suppress(found, nms_radius)

    per_channel = map_channels(channel_candidates, range(heatmaps.channels), workers=workers)
    candidates = sorted((c for found in per_channel for c in found), key=_priority)
    logger.debug('extracted %d candidates over %d channels', len(candidates), heatmaps.channels)
    return candidates


def _displacement_planes(kc_field, joint):
    base = getattr(kc_field, 'base', kc_field)
    return base.channel(2 * joint), base.channel(2 * joint + 1)


def candidate_vote(candidate, kc_field, use_keycentroid=True):
    """Where the candidate pixel's own displacement points."""
    x, y = candidate.position
    if not use_keycentroid:
        return float(x), float(y)
    dx, dy = _displacement_planes(kc_field, candidate.joint)
    return x + float(dx[y, x]), y + float(dy[y, x])


def refine_keypoint(candidate, kc_field, heatmaps, radius, threshold=0.5, vote_radius=10.0,
                    use_keycentroid=True):
    """
    Sub-pixel position of ``candidate`` from the votes of its disk.

    Every pixel p of D_R(candidate) whose activation in ``heatmaps`` (the
    smoothed maps) reaches ``threshold`` votes for p + k(p). Starting from
    the candidate's own vote, the estimate moves to the activation-weighted
    mean of the votes within ``vote_radius`` until it settles, and is then
    clamped to distance R from the candidate. When every vote lies within
    ``vote_radius`` of the start this is the plain activation-weighted mean
    of all votes; on disks shared with a same-joint neighbour only the
    cluster around the candidate's own vote counts. Confidence is the
    activation-weighted mean of the smoothed heatmap sampled at the
    contributing votes, clamped to [0, 1]. With ``use_keycentroid`` off the
    votes are the pixel positions themselves.
    """
    check_radius(radius)
    plane = heatmaps.channel(candidate.joint)
    cx, cy = candidate.position
    ys, xs = disk_window(heatmaps.height, heatmaps.width, (cx, cy), radius)
    activation = plane[ys, xs].astype(np.float64)
    active = activation >= threshold
    ys, xs, activation = ys[active], xs[active], activation[active]
    if xs.size == 0:
        logger.warning('candidate %s of joint %d has no votes; keeping it as is', candidate.position, candidate.joint)
        return RefinedKeypoint(candidate.joint, SubPixel(float(cx), float(cy)), candidate.raw_score, 1, candidate.position)

    if use_keycentroid:
        dx, dy = _displacement_planes(kc_field, candidate.joint)
        vote_x = xs + dx[ys, xs].astype(np.float64)
        vote_y = ys + dy[ys, xs].astype(np.float64)
    else:
        vote_x, vote_y = xs.astype(np.float64), ys.astype(np.float64)

    ex, ey = candidate_vote(candidate, kc_field, use_keycentroid)
    radius_sq = vote_radius * vote_radius
    selected = np.zeros(xs.size, dtype=bool)
    for _ in range(REFINE_STEPS):
        near = (vote_x - ex) ** 2 + (vote_y - ey) ** 2 <= radius_sq
        if not near.any():
            break
        selected = near
        weights = activation[near]
        nx = float(np.dot(weights, vote_x[near]) / weights.sum())
        ny = float(np.dot(weights, vote_y[near]) / weights.sum())
        moved = math.hypot(nx - ex, ny - ey)
        ex, ey = nx, ny
        if moved < REFINE_TOL:
            break

    offset = math.hypot(ex - cx, ey - cy)
    if offset > radius:
        ex = cx + (ex - cx) * radius / offset
        ey = cy + (ey - cy) * radius / offset

    if selected.any():
        weights = activation[selected]
        samples = bilinear_sample(plane, vote_x[selected], vote_y[selected])
        confidence = float(np.dot(weights, samples) / weights.sum())
        votes = int(selected.sum())
    else:
        confidence = bilinear_sample(plane, ex, ey)
        votes = 1
    confidence = min(max(confidence, 0.0), 1.0)
    return RefinedKeypoint(candidate.joint, SubPixel(ex, ey), confidence, votes, candidate.position)


def _near_any(point, points, radius):
    x, y = point
    return any((x - px) ** 2 + (y - py) ** 2 <= radius * radius for px, py in points)


def _unexplained_votes(joint, kc_field, heatmaps, threshold, found, vote_radius):
    """Active pixels of ``joint`` whose vote no accepted keypoint accounts for."""
    plane = heatmaps.channel(joint)
    ys, xs = np.nonzero(plane >= threshold)
    dx, dy = _displacement_planes(kc_field, joint)
    vote_x = xs + dx[ys, xs].astype(np.float64)
    vote_y = ys + dy[ys, xs].astype(np.float64)
    open_ = np.ones(xs.size, dtype=bool)
    for px, py in found:
        open_ &= (vote_x - px) ** 2 + (vote_y - py) ** 2 > vote_radius * vote_radius
    return ys[open_], xs[open_], vote_x[open_], vote_y[open_], plane[ys[open_], xs[open_]]


def residual_keypoints(joint, kc_field, heatmaps, config, found):
    """
    Keypoints for vote clusters no heatmap peak reached.

    A disk hidden under another person's disk of the same joint has no
    local maximum of its own, yet its pixels still vote for it. Unexplained
    votes are taken in priority order; a cluster of at least
    ``config.effective_min_cluster_votes`` votes is refined from its
    strongest pixel.
    ``found`` is extended in place.
    """
    vote_radius = config.effective_vote_radius
    ys, xs, vote_x, vote_y, scores = _unexplained_votes(
        joint, kc_field, heatmaps, config.threshold, found, vote_radius,
    )
    order = np.lexsort((xs, ys, -scores))
    ys, xs, vote_x, vote_y, scores = ys[order], xs[order], vote_x[order], vote_y[order], scores[order]
    open_ = np.ones(xs.size, dtype=bool)
    radius_sq = vote_radius * vote_radius
    keypoints = []
    for index in range(xs.size):
        if not open_[index]:
            continue
        cluster = open_ & ((vote_x - vote_x[index]) ** 2 + (vote_y - vote_y[index]) ** 2 <= radius_sq)
        open_ &= ~cluster
        if cluster.sum() < config.effective_min_cluster_votes:
            continue
        candidate = KeypointCandidate(joint, GridPoint(int(xs[index]), int(ys[index])), float(scores[index]))
        keypoint = refine_keypoint(
            candidate, kc_field, heatmaps, config.radius, config.threshold, vote_radius, True,
        )
        if _near_any(keypoint.position, found, vote_radius):
            continue
        open_ &= (vote_x - keypoint.position.x) ** 2 + (vote_y - keypoint.position.y) ** 2 > radius_sq
        found.append(keypoint.position)
        keypoints.append(keypoint)
    return keypoints


def refine_candidates(candidates, kc_field, heatmaps, config):
    """
    Refine candidates in priority order, dropping a candidate whose own vote
    or refined position lands within the vote radius of a keypoint already
    refined for the same joint. With KeyCentroid votes on, vote clusters
    left unexplained then seed keypoints of their own, joint by joint.
    """
    vote_radius = config.effective_vote_radius
    accepted = {}
    refined = []
    for candidate in candidates:
        found = accepted.setdefault(candidate.joint, [])
        if _near_any(candidate_vote(candidate, kc_field, config.use_keycentroid), found, vote_radius):
            continue
        keypoint = refine_keypoint(
            candidate, kc_field, heatmaps, config.radius, config.threshold,
            vote_radius, config.use_keycentroid,
        )
        if _near_any(keypoint.position, found, vote_radius):
            continue
        found.append(keypoint.position)
        refined.append(keypoint)
    from_peaks = len(refined)
    if config.use_keycentroid:
        for joint in range(heatmaps.channels):
            refined.extend(residual_keypoints(joint, kc_field, heatmaps, config, accepted.setdefault(joint, [])))
    logger.debug('refined %d of %d candidates, %d more from unexplained votes',
                 from_peaks, len(candidates), len(refined) - from_peaks)
    return refined


def assemble_poses(refined, skeleton=COCO_SKELETON, link_radius=64.0, duplicate_radius=None):
    """
    Greedy kinematic grouping.

    The most confident unused keypoint seeds a pose and the tree is walked
    breadth-first from its joint, attaching the nearest unused keypoint of
    each child joint within ``link_radius`` of its parent. When a parent is
    missing, the search runs from the nearest present ancestor with the
    radius grown per skipped joint. A keypoint lying within
    ``duplicate_radius`` (default link_radius / 2, i.e. R) of an existing
    pose's same joint does not seed a new pose.
    """
    check_radius(link_radius, 'link_radius')
    if duplicate_radius is None:
        duplicate_radius = link_radius / 2.0
    order = sorted(
        range(len(refined)),
        key=lambda i: (-refined[i].confidence, refined[i].joint, refined[i].position.y, refined[i].position.x),
    )
    by_joint = {}
    for index in order:
        by_joint.setdefault(refined[index].joint, []).append(index)
    used = set()
    poses = []

    for seed in order:
        if seed in used:
            continue
        keypoint = refined[seed]
        if any(
            pose[keypoint.joint] is not None
            and _near_any(keypoint.position, [pose[keypoint.joint].position], duplicate_radius)
            for pose in poses
        ):
            continue
        joints = [None] * skeleton.num_joints
        joints[keypoint.joint] = keypoint
        used.add(seed)
        anchors = {keypoint.joint: (keypoint.position, 0)}
        for parent, child in skeleton.walk(keypoint.joint):
            if parent not in anchors:
                continue
            base, skipped = anchors[parent]
            reach = link_radius * (skipped + 1)
            best, best_dist = None, None
            for index in by_joint.get(child, ()):
                if index in used:
                    continue
                position = refined[index].position
                dist = math.hypot(position.x - base.x, position.y - base.y)
                if dist <= reach and (best is None or dist < best_dist):
                    best, best_dist = index, dist
            if best is None:
                anchors[child] = (base, skipped + 1)
            else:
                used.add(best)
                joints[child] = refined[best]
                anchors[child] = (refined[best].position, 0)
        poses.append(joints)

    return [PersonPose.from_joints(joints) for joints in poses]


def rescore(poses, mode='mean', radius=SOFT_NMS_RADIUS):
    """
    ``mean`` keeps the mean-confidence score. ``soft_nms`` rescales each
    pose by the joints no higher-scored pose already explains: the sum of
    confidences of joints farther than ``radius`` from the same joint of
    every higher-scored pose, over the joint count.
    """
    if mode == 'mean':
        return list(poses)
    if mode != 'soft_nms':
        raise ValueError(f'unknown score mode {mode!r}')
    ranked = sorted(poses, key=lambda pose: -pose.instance_score)
    rescored = []
    for rank, pose in enumerate(ranked):
        total = 0.0
        for kp in pose.present():
            claimed = [
                other.joints[kp.joint].position
                for other in ranked[:rank]
                if other.joints[kp.joint] is not None
            ]
            if not _near_any(kp.position, claimed, radius):
                total += kp.confidence
        rescored.append(pose.with_score(total / len(pose.joints)))
    return rescored


def decode_poses(heatmaps, kc_field, skeleton=COCO_SKELETON, config=None, **overrides):
    """
    Full pose decode. Returns (poses, refined keypoints); poses are in
    descending score order.
    """
    config = replace(config or PoseDecodeConfig(), **overrides)
    check_radius(config.radius)
    smoothed = heatmaps
    if config.smooth:
        smoothed = pgo_smooth(heatmaps, skeleton, config.sigma_hvk, config.sigma_lvk, workers=config.workers)
    candidates = extract_candidates(smoothed, config.threshold, config.nms_radius, workers=config.workers)
    refined = refine_candidates(candidates, kc_field, smoothed, config)
    poses = assemble_poses(refined, skeleton, config.effective_link_radius, duplicate_radius=config.radius)
    poses = rescore(poses, config.score_mode)
    poses.sort(key=lambda pose: -pose.instance_score)
    logger.debug('decoded %d poses from %d keypoints', len(poses), len(refined))
    return poses, refined


def perturb(field, sigma, rng_seed=0, clip=None):
    """``field`` plus i.i.d. Gaussian noise, optionally clipped to ``clip``."""
    if sigma <= 0:
        return field
    rng = np.random.default_rng(rng_seed)
    data = field.data + rng.normal(0.0, sigma, size=field.shape).astype(np.float32)
    if clip is not None:
        data = np.clip(data, *clip)
    return DenseField(data, copy=False)
