"""
Deterministic stick-figure scenes.

A figure is built from joint angles around a neck origin; its body mask is
the union of limb capsules (a head disk plus one capsule per limb). Every
random draw comes from a numpy Generator seeded by the caller, so a scene
is a pure function of its arguments.
"""
import logging
import math

import numpy as np
from scipy import ndimage, signal

from .scene import PersonGT, Scene
from .skeleton import JOINT_NAMES, NUM_JOINTS

logger = logging.getLogger(__name__)

J = {name: index for index, name in enumerate(JOINT_NAMES)}

# Capsule radii in figure units (one unit = person_height / 120)
HEAD_RADIUS = 11.0
NECK_RADIUS = 4.0
TORSO_RADIUS = 12.0
FLANK_RADIUS = 5.0
GIRDLE_RADIUS = 5.0
PELVIS_RADIUS = 6.0
UPPER_ARM_RADIUS = 5.0
FOREARM_RADIUS = 4.0
THIGH_RADIUS = 7.0
SHIN_RADIUS = 5.0
MIN_CAPSULE_RADIUS = 1.5

MIN_CANVAS = 64
PLACEMENT_ATTEMPTS = 200
SCENE_RESTARTS = 25
# Gap between grown bounding boxes, in figure units; longer than any limb
SPACING_UNITS = 36.0
OVERLAP_BAND = 0.05


def default_person_height(height, width, num_persons=1):
    cells = math.ceil(math.sqrt(num_persons))
    divisor = 4.0 if cells == 1 else 2.5 * cells
    return float(np.clip(min(height, width) / divisor, 48.0, 140.0))


def _direction(down, right, side, angle):
    return down * math.cos(angle) + side * right * math.sin(angle)


def sample_angles(rng):
    """Joint angles for one figure, drawn in a fixed order."""
    return {
        'lean': rng.uniform(-0.2, 0.2),
        'nose': rng.uniform(-2.0, 2.0),
        'upper_arm': rng.uniform(0.15, 2.4, size=2),
        'forearm': rng.uniform(-1.2, 1.2, size=2),
        'thigh': rng.uniform(0.0, 0.5, size=2),
        'shin': rng.uniform(-0.6, 0.4, size=2),
    }


def jitter_angles(angles, rng, amount):
    jittered = {}
    for key, value in angles.items():
        noise = rng.uniform(-amount, amount, size=np.shape(value))
        jittered[key] = value + (noise if np.ndim(value) else float(noise))
    return jittered


def build_figure(angles, person_height):
    """
    Keypoints (17, 2) and capsules [(a, b, radius)] relative to the neck.
    Left joints sit on the image right, as for a figure facing the camera.
    """
    u = person_height / 120.0
    lean = angles['lean']
    down = np.array([math.sin(lean), math.cos(lean)])
    right = np.array([math.cos(lean), -math.sin(lean)])
    neck = np.zeros(2)
    pelvis = neck + down * 40 * u

    kp = np.zeros((NUM_JOINTS, 2))
    kp[J['nose']] = neck - down * 16 * u + right * angles['nose'] * u
    nose = kp[J['nose']]
    kp[J['left_eye']] = nose - down * 4 * u + right * 4 * u
    kp[J['right_eye']] = nose - down * 4 * u - right * 4 * u
    kp[J['left_ear']] = nose - down * 2 * u + right * 8 * u
    kp[J['right_ear']] = nose - down * 2 * u - right * 8 * u
    kp[J['left_shoulder']] = neck + right * 12 * u
    kp[J['right_shoulder']] = neck - right * 12 * u
    kp[J['left_hip']] = pelvis + right * 9 * u
    kp[J['right_hip']] = pelvis - right * 9 * u

    for index, (prefix, side) in enumerate((('left', 1.0), ('right', -1.0))):
        alpha = angles['upper_arm'][index]
        beta = alpha + angles['forearm'][index]
        elbow = kp[J[f'{prefix}_shoulder']] + 24 * u * _direction(down, right, side, alpha)
        kp[J[f'{prefix}_elbow']] = elbow
        kp[J[f'{prefix}_wrist']] = elbow + 22 * u * _direction(down, right, side, beta)

        gamma = angles['thigh'][index]
        delta = gamma + angles['shin'][index]
        knee = kp[J[f'{prefix}_hip']] + 30 * u * _direction(down, right, side, gamma)
        kp[J[f'{prefix}_knee']] = knee
        kp[J[f'{prefix}_ankle']] = knee + 28 * u * _direction(down, right, side, delta)

    head = nose - down * 2 * u
    capsules = [
        (head, head, HEAD_RADIUS),
        (neck, nose, NECK_RADIUS),
        (neck, pelvis, TORSO_RADIUS),
        (kp[J['left_shoulder']], kp[J['right_shoulder']], GIRDLE_RADIUS),
        (kp[J['left_hip']], kp[J['right_hip']], PELVIS_RADIUS),
    ]
    for prefix in ('left', 'right'):
        shoulder, elbow, wrist = (kp[J[f'{prefix}_{n}']] for n in ('shoulder', 'elbow', 'wrist'))
        hip, knee, ankle = (kp[J[f'{prefix}_{n}']] for n in ('hip', 'knee', 'ankle'))
        capsules += [
            (shoulder, hip, FLANK_RADIUS),
            (shoulder, elbow, UPPER_ARM_RADIUS),
            (elbow, wrist, FOREARM_RADIUS),
            (hip, knee, THIGH_RADIUS),
            (knee, ankle, SHIN_RADIUS),
        ]
    capsules = [(a, b, max(r * u, MIN_CAPSULE_RADIUS)) for a, b, r in capsules]
    return kp, capsules


def capsule_bounds(capsules):
    """Inclusive float bounds (x0, y0, x1, y1) of a capsule set."""
    x0 = min(min(a[0], b[0]) - r for a, b, r in capsules)
    y0 = min(min(a[1], b[1]) - r for a, b, r in capsules)
    x1 = max(max(a[0], b[0]) + r for a, b, r in capsules)
    y1 = max(max(a[1], b[1]) + r for a, b, r in capsules)
    return x0, y0, x1, y1


def rasterize_capsules(height, width, capsules, offset=(0.0, 0.0)):
    """Union of capsules as a boolean (H, W) mask; pixel centres tested."""
    mask = np.zeros((height, width), dtype=bool)
    ox, oy = offset
    for a, b, radius in capsules:
        ax, ay = a[0] + ox, a[1] + oy
        bx, by = b[0] + ox, b[1] + oy
        x0 = max(int(math.floor(min(ax, bx) - radius)), 0)
        x1 = min(int(math.ceil(max(ax, bx) + radius)), width - 1)
        y0 = max(int(math.floor(min(ay, by) - radius)), 0)
        y1 = min(int(math.ceil(max(ay, by) + radius)), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dx, dy = bx - ax, by - ay
        length_sq = dx * dx + dy * dy
        if length_sq > 0:
            t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / length_sq, 0.0, 1.0)
        else:
            t = np.zeros(xs.shape)
        dist_sq = (xs - (ax + t * dx)) ** 2 + (ys - (ay + t * dy)) ** 2
        mask[y0:y1 + 1, x0:x1 + 1] |= dist_sq <= radius * radius
    return mask


def _place(rng, bounds, height, width):
    """Random offset keeping the bounds one pixel inside the canvas, or None."""
    x0, y0, x1, y1 = bounds
    low_x, high_x = 1.0 - x0, (width - 2.0) - x1
    low_y, high_y = 1.0 - y0, (height - 2.0) - y1
    if high_x < low_x or high_y < low_y:
        return None
    return rng.uniform(low_x, high_x), rng.uniform(low_y, high_y)


def _boxes_clear(box, placed, spacing):
    x0, y0, x1, y1 = box
    for px0, py0, px1, py1 in placed:
        if not (x1 + spacing < px0 or px1 + spacing < x0 or y1 + spacing < py0 or py1 + spacing < y0):
            return False
    return True


def _draw_figure(rng, base_angles, pose_jitter, figure_height):
    if base_angles is None:
        angles = sample_angles(rng)
    else:
        angles = jitter_angles(base_angles, rng, pose_jitter)
    return build_figure(angles, figure_height)


def _place_figures(rng, num_persons, height, width, figure_height, spacing,
                   base_angles, pose_jitter):
    """One rejection-sampling pass; None when some person finds no room."""
    boxes = []
    figures = []
    for _ in range(num_persons):
        for _ in range(PLACEMENT_ATTEMPTS):
            keypoints, capsules = _draw_figure(rng, base_angles, pose_jitter, figure_height)
            bounds = capsule_bounds(capsules)
            offset = _place(rng, bounds, height, width)
            if offset is None:
                continue
            box = (bounds[0] + offset[0], bounds[1] + offset[1],
                   bounds[2] + offset[0], bounds[3] + offset[1])
            if _boxes_clear(box, boxes, spacing):
                boxes.append(box)
                figures.append((keypoints, capsules, offset))
                break
        else:
            return None
    return figures


def generate_scene(num_persons, canvas=(401, 401), rng_seed=0, person_height=None,
                   spacing=None, min_area=0, shared_pose=False, pose_jitter=0.1,
                   image_id=1):
    """
    Build a scene of ``num_persons`` separated stick figures.

    ``canvas`` is (H, W). Persons are placed by seeded rejection sampling so
    their bounding boxes, grown by ``spacing`` pixels (default 36 figure
    units, more than any limb), never touch. With ``shared_pose`` every
    figure starts from one set of joint angles perturbed by ``pose_jitter``
    radians, which yields near congruent bodies for occlusion studies.
    Persons whose mask is smaller than ``min_area`` pixels are flagged
    ``is_small``.
    """
    if num_persons < 1:
        raise ValueError(f'num_persons must be at least 1, got {num_persons}')
    height, width = int(canvas[0]), int(canvas[1])
    if height < MIN_CANVAS or width < MIN_CANVAS:
        raise ValueError(f'canvas must be at least {MIN_CANVAS}x{MIN_CANVAS}, got {height}x{width}')

    rng = np.random.default_rng(rng_seed)
    figure_height = person_height or default_person_height(height, width, num_persons)
    if spacing is None:
        spacing = SPACING_UNITS * figure_height / 120.0
    base_angles = sample_angles(rng) if shared_pose else None

    for restart in range(SCENE_RESTARTS):
        figures = _place_figures(rng, num_persons, height, width, figure_height,
                                 spacing, base_angles, pose_jitter)
        if figures is not None:
            break
        logger.debug('placement pass %d failed; restarting', restart)
    else:
        if num_persons == 1:
            raise ValueError(
                f'canvas {height}x{width} is too small for a figure of height {figure_height:.0f}'
            )
        raise ValueError(f'could not place {num_persons} persons on a {height}x{width} canvas')

    persons = []
    for instance_id, (keypoints, capsules, offset) in enumerate(figures, start=1):
        mask = rasterize_capsules(height, width, capsules, offset)
        area = int(mask.sum())
        persons.append(PersonGT(
            instance_id=instance_id,
            keypoints=keypoints + np.asarray(offset),
            visible=np.ones(NUM_JOINTS, dtype=bool),
            mask=mask,
            is_small=area < min_area,
        ))
        logger.debug('placed person %d (area %d) at %.1f,%.1f', instance_id, area, *offset)

    return Scene(height=height, width=width, persons=persons, image_id=image_id)


def generate_dataset(count, num_persons, canvas=(401, 401), rng_seed=0, **kwargs):
    """
    ``count`` scenes with image ids 1..count. ``num_persons`` is an int or an
    inclusive (low, high) range drawn per scene.
    """
    seeds = np.random.SeedSequence(rng_seed).spawn(count)
    scenes = []
    for index, seed in enumerate(seeds, start=1):
        rng = np.random.default_rng(seed)
        if isinstance(num_persons, (tuple, list)):
            persons = int(rng.integers(num_persons[0], num_persons[1] + 1))
        else:
            persons = int(num_persons)
        scene_seed = int(rng.integers(0, 2 ** 31 - 1))
        scenes.append(generate_scene(persons, canvas, scene_seed, image_id=index, **kwargs))
    return scenes


def _shift_mask(mask, dx, dy):
    height, width = mask.shape
    shifted = np.zeros_like(mask)
    src_y = slice(max(0, -dy), min(height, height - dy))
    src_x = slice(max(0, -dx), min(width, width - dx))
    dst_y = slice(max(0, dy), min(height, height + dy))
    dst_x = slice(max(0, dx), min(width, width + dx))
    shifted[dst_y, dst_x] = mask[src_y, src_x]
    return shifted


def _largest_component(mask):
    labels, count = ndimage.label(mask)
    if count <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def occlude_scene(scene, pair, overlap_fraction, rng_seed=0):
    """
    Move the second person of ``pair`` behind the first.

    The translation makes the first person's mask cover at least
    ``overlap_fraction`` of the second person's body (intersection over the
    moved person's area). The moved person sits behind everyone: it keeps
    only pixels no other person owns, reduced to their largest 4-connected
    piece, and its keypoints outside that piece become not-visible. When
    the fraction cannot be reached on the canvas the best achievable
    placement is used and a warning is logged; ``Scene.achieved_overlap``
    always holds the measured value.
    """
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ValueError(f'overlap_fraction must lie in [0, 1], got {overlap_fraction}')
    front_id, back_id = pair
    if front_id == back_id:
        raise ValueError('occlusion needs two distinct persons')
    try:
        front = scene.person(front_id)
        back = scene.person(back_id)
    except KeyError as exc:
        raise ValueError(f'pair {pair} names a missing person') from exc

    height, width = scene.height, scene.width
    body = back.mask
    area = int(body.sum())
    if area == 0:
        raise ValueError(f'person {back_id} has an empty mask')

    # overlap[dy + H - 1, dx + W - 1] = |front ∩ shift(body, dx, dy)|
    overlap = np.rint(signal.correlate(
        front.mask.astype(np.float64), body.astype(np.float64), mode='full', method='fft'
    )).astype(np.int64)

    ys, xs = np.nonzero(body)
    kx, ky = back.keypoints[:, 0], back.keypoints[:, 1]
    min_x = min(xs.min(), np.floor(kx.min()))
    max_x = max(xs.max(), np.ceil(kx.max()))
    min_y = min(ys.min(), np.floor(ky.min()))
    max_y = max(ys.max(), np.ceil(ky.max()))
    dx_range = np.arange(int(-min_x), int(width - 1 - max_x) + 1)
    dy_range = np.arange(int(-min_y), int(height - 1 - max_y) + 1)
    if dx_range.size == 0 or dy_range.size == 0:
        dx_range = np.array([0])
        dy_range = np.array([0])

    grid_dy, grid_dx = np.meshgrid(dy_range, dx_range, indexing='ij')
    fractions = overlap[grid_dy + height - 1, grid_dx + width - 1] / area
    distance = grid_dx ** 2 + grid_dy ** 2

    upper = overlap_fraction + OVERLAP_BAND if overlap_fraction > 0 else 0.0
    in_band = (fractions >= overlap_fraction) & (fractions <= upper)
    reaching = fractions >= overlap_fraction
    if in_band.any():
        candidates = in_band
    elif reaching.any():
        candidates = reaching
    else:
        best = fractions.max()
        candidates = fractions == best
        logger.warning(
            'overlap %.2f unreachable for person %d; best achievable is %.3f',
            overlap_fraction, back_id, best,
        )
    nearest = distance[candidates].min()
    choices = np.argwhere(candidates & (distance == nearest))
    rng = np.random.default_rng(rng_seed)
    row, col = choices[int(rng.integers(len(choices)))]
    dx, dy = int(grid_dx[row, col]), int(grid_dy[row, col])
    achieved = float(fractions[row, col])

    moved = _shift_mask(body, dx, dy)
    others = np.zeros_like(moved)
    for person in scene.persons:
        if person.instance_id != back_id:
            others |= person.mask
    residual = _largest_component(moved & ~others)
    keypoints = back.keypoints + np.array([dx, dy], dtype=np.float64)

    visible = back.visible.copy()
    for joint, (x, y) in enumerate(keypoints):
        col_i, row_i = int(round(x)), int(round(y))
        inside = 0 <= col_i < width and 0 <= row_i < height
        visible[joint] = visible[joint] and inside and bool(residual[row_i, col_i] if inside else False)

    persons = []
    for person in scene.persons:
        if person.instance_id != back_id:
            persons.append(person)
        elif residual.any():
            persons.append(PersonGT(
                instance_id=back_id,
                keypoints=keypoints,
                visible=visible,
                mask=residual,
                is_small=back.is_small,
                occlusion=1.0 - residual.sum() / area,
            ))
        else:
            logger.warning('person %d is fully hidden and leaves the scene', back_id)

    logger.info('moved person %d by (%d, %d); overlap %.3f', back_id, dx, dy, achieved)
    return Scene(height=height, width=width, persons=persons,
                 image_id=scene.image_id, achieved_overlap=achieved)
