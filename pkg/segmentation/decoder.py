"""
Offset decoding into instance masks.

Each foreground pixel m embeds to e = m + v. Instances attract embeddings
through their MaskCentroids with membership phi = exp(-|e - C|^2 / (2 sigma^2)).
Static centroids are found as peaks of the embedding density; dynamic ones
start from a keypoint of each decoded pose and move to the mean of the
embeddings they claim; clusters no pose reaches are seeded from the density
of the embeddings left over. Memberships are smoothed per instance,
thresholded at 0.5 and paired with the poses.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from encoding.targets import CentroidMode, MaskCentroidSet, OffsetField
from fields.core import DenseField, SubPixel, map_channels
from fields.kernels import smooth_gaussian, smooth_plane

from .instances import InstanceResult, MembershipMap, PixelEmbeddings

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_J = 5.0
ASSIGN_THRESHOLD = 0.5
IGO_SIGMA_RANGE = (0.1, 1.0)
VOTE_MAP_SIGMA = 1.0
CENTROID_WINDOW = 1.0
MIN_VOTES = 10


@dataclass(frozen=True)
class SegDecodeConfig:
    mode: str = CentroidMode.DYNAMIC.value
    sigma_j: float = DEFAULT_SIGMA_J
    igo_sigma: float = 0.1
    smooth: bool = True
    max_iters: int = 20
    tol: float = 1e-3
    min_votes: int = MIN_VOTES
    workers: int = 1


def assignment_radius(sigma_j):
    """Distance at which phi drops to exactly 0.5."""
    return sigma_j * math.sqrt(2.0 * math.log(2.0))


def embed_pixels(offsets, foreground=None):
    """
    Embeddings e = m + v of the foreground pixels. ``offsets`` is an
    OffsetField (its own foreground is used unless one is given) or a
    2-channel DenseField.
    """
    if isinstance(offsets, OffsetField):
        field = offsets.field
        if foreground is None:
            foreground = offsets.foreground
    else:
        field = offsets
    if field.channels != 2:
        raise ValueError(f'offsets need 2 channels, got {field.channels}')
    if foreground is None:
        raise ValueError('a foreground mask is required')
    foreground = np.asarray(foreground, dtype=bool)
    if foreground.shape != field.shape[1:]:
        raise ValueError(f'foreground {foreground.shape} does not match offsets {field.shape[1:]}')
    ys, xs = np.nonzero(foreground)
    points = np.stack([
        xs + field.data[0, ys, xs].astype(np.float64),
        ys + field.data[1, ys, xs].astype(np.float64),
    ], axis=1)
    return PixelEmbeddings(ys, xs, points, field.height, field.width)


def _phi(points, centre, sigma):
    dist_sq = ((points - np.asarray(centre, dtype=np.float64)) ** 2).sum(axis=1)
    return np.exp(-dist_sq / (2.0 * sigma * sigma))


def _membership(embeddings, centroids, sigmas, instance_ids, workers=1, iterations=0):
    def instance_plane(index):
        return embeddings.scatter(_phi(embeddings.points, centroids[index], sigmas[index]))

    planes = map_channels(instance_plane, range(len(instance_ids)), workers=workers)
    data = np.stack(planes) if planes else np.zeros((0, embeddings.height, embeddings.width), dtype=np.float32)
    return MembershipMap(instance_ids, DenseField(data, copy=False), embeddings.foreground, iterations)


def membership_static(embeddings, centroids, workers=1):
    """phi of every foreground embedding towards each fixed centroid."""
    if not len(centroids):
        raise ValueError('at least one centroid is required')
    return _membership(embeddings, centroids.centroids, centroids.sigmas, centroids.instance_ids, workers)


def _assign(phi):
    """Index of the winning instance per row, -1 where no phi exceeds 0.5."""
    if phi.shape[1] == 0:
        return np.full(phi.shape[0], -1)
    winner = np.argmax(phi, axis=1)
    best = phi[np.arange(phi.shape[0]), winner]
    return np.where(best > ASSIGN_THRESHOLD, winner, -1)


def membership_dynamic(embeddings, seeds, sigma_j=DEFAULT_SIGMA_J, max_iters=20, tol=1e-3, workers=1):
    """
    Seeded clustering of embeddings.

    Each round assigns every embedding to its highest-phi instance when that
    phi exceeds 0.5, then moves each centroid to the mean of its assigned
    embeddings; an instance with nothing assigned keeps its centroid. Stops
    once no centroid moves by ``tol`` or after ``max_iters`` rounds.
    Returns (membership, centroids); instance ids are seed indices.
    """
    if not len(seeds):
        raise ValueError('at least one seed is required')
    if max_iters < 1:
        raise ValueError(f'max_iters must be at least 1, got {max_iters}')
    if not tol > 0:
        raise ValueError(f'tol must be positive, got {tol}')
    if not sigma_j > 0:
        raise ValueError(f'sigma_j must be positive, got {sigma_j}')

    centroids = np.array([(float(x), float(y)) for x, y in seeds], dtype=np.float64)
    points = embeddings.points
    iterations = 0
    converged = False
    while iterations < max_iters:
        iterations += 1
        phi = np.stack([_phi(points, centre, sigma_j) for centre in centroids], axis=1)
        owner = _assign(phi)
        updated = centroids.copy()
        for index in range(len(centroids)):
            members = owner == index
            if members.any():
                updated[index] = points[members].mean(axis=0)
        moved = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        logger.debug('dynamic round %d: largest centroid move %.4f px', iterations, moved)
        if moved < tol:
            converged = True
            break

    if not converged:
        logger.warning('dynamic centroids did not settle within %d rounds', max_iters)
    ids = list(range(len(centroids)))
    sigmas = [sigma_j] * len(centroids)
    membership = _membership(embeddings, centroids, sigmas, ids, workers, iterations)
    return membership, MaskCentroidSet(ids, centroids, sigmas, CentroidMode.DYNAMIC)


def igo_smooth(membership, sigma=0.1, workers=1):
    """Smooth every instance channel with the same Gaussian, clamped to [0, 1]."""
    low, high = IGO_SIGMA_RANGE
    if not low <= sigma <= high:
        raise ValueError(f'igo sigma must lie in [{low}, {high}], got {sigma}')
    if not len(membership):
        return membership
    smoothed = smooth_gaussian(membership.field, [sigma] * len(membership), workers=workers)
    data = np.clip(smoothed.data, 0.0, 1.0)
    return replace(membership, field=DenseField(data, copy=False))


def finalize_masks(membership):
    """
    One boolean mask per instance channel. A foreground pixel goes to the
    instance of highest phi, ties to the lower instance id, provided that
    phi exceeds 0.5. The masks are pairwise disjoint.
    """
    count = len(membership)
    if count == 0:
        return []
    order = np.argsort(membership.instance_ids, kind='stable')
    data = membership.field.data[order]
    winner = np.argmax(data, axis=0)
    best = np.take_along_axis(data, winner[np.newaxis], axis=0)[0]
    assigned = membership.foreground & (best > ASSIGN_THRESHOLD)
    masks = [None] * count
    for rank, index in enumerate(order):
        masks[index] = assigned & (winner == rank)
    return masks


def detect_centroids(embeddings, sigma_j=DEFAULT_SIGMA_J, min_votes=MIN_VOTES):
    """
    Static centroids from the embedding density.

    Embeddings are splatted to their nearest pixel and the count map is
    smoothed. Its local maxima are taken strongest first, ties in (y, x)
    order, skipping any within the 0.5-membership radius of a kept one. The
    centroid of a peak is the mean of the embeddings within one pixel of it,
    and a peak needs ``min_votes`` of those.
    """
    height, width = embeddings.height, embeddings.width
    counts = np.zeros((height, width), dtype=np.float32)
    if len(embeddings):
        cols = np.clip(np.rint(embeddings.points[:, 0]), 0, width - 1).astype(np.intp)
        rows = np.clip(np.rint(embeddings.points[:, 1]), 0, height - 1).astype(np.intp)
        np.add.at(counts, (rows, cols), 1.0)
    density = smooth_plane(counts, VOTE_MAP_SIGMA)

    peaks = (density == ndimage.maximum_filter(density, size=3, mode='constant', cval=0.0)) & (density > 0)
    ys, xs = np.nonzero(peaks)
    order = np.lexsort((xs, ys, -density[ys, xs]))

    radius_sq = assignment_radius(sigma_j) ** 2
    window_sq = CENTROID_WINDOW * CENTROID_WINDOW
    kept = []
    for index in order:
        x, y = int(xs[index]), int(ys[index])
        if any((x - kx) ** 2 + (y - ky) ** 2 <= radius_sq for kx, ky in kept):
            continue
        near = ((embeddings.points - (x, y)) ** 2).sum(axis=1) <= window_sq
        if near.sum() < min_votes:
            continue
        cx, cy = embeddings.points[near].mean(axis=0)
        kept.append((float(cx), float(cy)))

    logger.debug('detected %d static centroids', len(kept))
    return MaskCentroidSet(range(len(kept)), np.array(kept).reshape(-1, 2), [sigma_j] * len(kept), CentroidMode.STATIC)


def select_seeds(poses, embeddings, sigma_j=DEFAULT_SIGMA_J):
    """
    One seed per pose, aligned with ``poses``.

    Poses are visited by descending score. Each takes the present joint that
    attracts the most unclaimed embeddings within the 0.5-membership radius
    (ties: higher confidence, then lower joint id) and claims them. A pose
    attracting none falls back to its most confident joint.
    """
    radius_sq = assignment_radius(sigma_j) ** 2
    claimed = np.zeros(len(embeddings), dtype=bool)
    seeds = [None] * len(poses)
    for index in sorted(range(len(poses)), key=lambda i: (-poses[i].instance_score, i)):
        pose = poses[index]
        best, best_key, best_near = None, None, None
        for kp in pose.present():
            near = ~claimed & (((embeddings.points - tuple(kp.position)) ** 2).sum(axis=1) <= radius_sq)
            key = (int(near.sum()), kp.confidence, -kp.joint)
            if best_key is None or key > best_key:
                best, best_key, best_near = kp, key, near
        if best_key[0] == 0:
            best = pose.high_confidence_joint()
            logger.debug('pose %d attracts no embeddings; seeding at joint %d', index, best.joint)
        else:
            claimed |= best_near
        seeds[index] = SubPixel(float(best.position.x), float(best.position.y))
    return seeds


def unclaimed_centroids(embeddings, centroids, sigma_j=DEFAULT_SIGMA_J, min_votes=MIN_VOTES):
    """
    Static centroids detected among the embeddings that none of
    ``centroids`` holds above 0.5 membership.
    """
    if not len(embeddings):
        return []
    phi = np.stack([_phi(embeddings.points, centre, sigma_j) for centre in centroids], axis=1)
    free = _assign(phi) < 0
    if not free.any():
        return []
    rest = PixelEmbeddings(
        embeddings.ys[free], embeddings.xs[free], embeddings.points[free], embeddings.height, embeddings.width,
    )
    found = detect_centroids(rest, sigma_j, min_votes)
    return [SubPixel(float(x), float(y)) for x, y in found.centroids]


def _mask_centre(mask):
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def _instance_score(pose, mask, plane):
    if pose is not None:
        return pose.instance_score
    return float(plane[mask].mean())


def pose_seg_unify(poses, masks, membership, paired=False):
    """
    Pair poses with masks. With ``paired`` the i-th mask belongs to the
    i-th pose and masks past the last pose are emitted alone. Otherwise pairs are formed greedily by ascending distance
    between a mask's pixel mean and a pose's most confident joint, one to
    one. Empty masks count as missing; unpaired halves are emitted alone.
    """
    masks = [mask if mask is not None and mask.any() else None for mask in masks]
    planes = [membership.channel(i) for i in range(len(membership))]
    if paired:
        if len(masks) < len(poses):
            raise ValueError(f'{len(poses)} poses cannot pair with {len(masks)} masks by index')
        links = [(i, i) for i in range(len(poses))]
        links += [(None, m) for m in range(len(poses), len(masks)) if masks[m] is not None]
    else:
        distances = []
        for p, pose in enumerate(poses):
            anchor = pose.high_confidence_joint().position
            for m, mask in enumerate(masks):
                if mask is not None:
                    cx, cy = _mask_centre(mask)
                    distances.append((math.hypot(cx - anchor.x, cy - anchor.y), p, m))
        distances.sort()
        used_poses, used_masks, links = set(), set(), []
        for _, p, m in distances:
            if p in used_poses or m in used_masks:
                continue
            used_poses.add(p)
            used_masks.add(m)
            links.append((p, m))
        links += [(p, None) for p in range(len(poses)) if p not in used_poses]
        links += [(None, m) for m in range(len(masks)) if m not in used_masks and masks[m] is not None]

    results = []
    for p, m in links:
        pose = poses[p] if p is not None else None
        mask = masks[m] if m is not None else None
        plane = planes[m] if m is not None else None
        if pose is None and mask is None:
            continue
        results.append(InstanceResult(pose, mask, plane, _instance_score(pose, mask, plane)))
    return results


def decode_instances(offsets, poses=(), foreground=None, config=None, **overrides):
    """
    Full instance decode: embed, membership (static or dynamic), optional
    instance-wise smoothing, thresholding and pairing with ``poses``.
    Results are ordered by descending score.
    """
    config = replace(config or SegDecodeConfig(), **overrides)
    mode = CentroidMode(config.mode)
    poses = list(poses)
    embeddings = embed_pixels(offsets, foreground)

    if mode == CentroidMode.DYNAMIC and not poses:
        logger.info('no poses to seed dynamic centroids; detecting static ones')
        mode = CentroidMode.STATIC
    if mode == CentroidMode.DYNAMIC:
        seeds = select_seeds(poses, embeddings, config.sigma_j)
        membership, settled = membership_dynamic(
            embeddings, seeds, config.sigma_j, config.max_iters, config.tol, config.workers,
        )
        # instances no pose reached, e.g. a figure hidden behind a congruent one
        extra = unclaimed_centroids(embeddings, settled.centroids, config.sigma_j, config.min_votes)
        if extra:
            logger.debug('%d embedding clusters claimed by no pose; adding seeds', len(extra))
            seeds = [SubPixel(float(x), float(y)) for x, y in settled.centroids] + extra
            membership, _ = membership_dynamic(
                embeddings, seeds, config.sigma_j, config.max_iters, config.tol, config.workers,
            )
    else:
        centroids = detect_centroids(embeddings, config.sigma_j, config.min_votes)
        if not len(centroids):
            logger.info('no instance centroids found among %d embeddings', len(embeddings))
            return pose_seg_unify(poses, [], _membership(embeddings, [], [], []))
        membership = membership_static(embeddings, centroids, config.workers)

    if config.smooth:
        membership = igo_smooth(membership, config.igo_sigma, config.workers)
    masks = finalize_masks(membership)
    results = pose_seg_unify(poses, masks, membership, paired=mode == CentroidMode.DYNAMIC)
    results.sort(key=lambda r: -r.score)
    logger.debug('decoded %d instances (%s centroids)', len(results), mode.value)
    return results
