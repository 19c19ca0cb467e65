"""
Image output for fields, masks and poses.

Fields become 8-bit grayscale PGM files. Instances and poses become
paletted PNGs where index 0 is background and instance k uses index k.
"""
import logging

import numpy as np
from PIL import Image, ImageDraw

from scenes.skeleton import TREE_EDGES

logger = logging.getLogger(__name__)

BASE_COLOURS = (
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
)
JOINT_RADIUS = 2


def palette():
    """768 palette bytes; instance colours repeat after the first twelve."""
    colours = [BASE_COLOURS[0]] + [BASE_COLOURS[1 + (i % (len(BASE_COLOURS) - 1))] for i in range(255)]
    return [channel for colour in colours for channel in colour]


def field_image(field, channel=None):
    """
    Grayscale image of one channel, or of the channel-wise maximum when
    ``channel`` is None. Values are stretched from min(0, low) to high;
    a constant plane renders black.
    """
    if channel is not None:
        if not 0 <= channel < field.channels:
            raise ValueError(f'channel {channel} outside 0..{field.channels - 1}')
        plane = field.channel(channel).astype(np.float64)
    else:
        plane = field.data.max(axis=0).astype(np.float64)
    low, high = min(float(plane.min()), 0.0), float(plane.max())
    if high <= low:
        pixels = np.zeros(plane.shape, dtype=np.uint8)
    else:
        pixels = np.rint((plane - low) / (high - low) * 255.0).astype(np.uint8)
    return Image.fromarray(pixels)


def label_image(masks, shape):
    """Paletted image; where masks overlap the earlier one wins."""
    if len(masks) > 255:
        raise ValueError(f'cannot draw {len(masks)} instances in one palette')
    labels = np.zeros(shape, dtype=np.uint8)
    for index in reversed(range(len(masks))):
        labels[np.asarray(masks[index], dtype=bool)] = index + 1
    image = Image.frombytes('P', (shape[1], shape[0]), labels.tobytes())
    image.putpalette(palette())
    return image


def pose_image(poses, shape, base=None):
    """Skeleton lines and joint dots of each pose, drawn in its palette index."""
    if base is None:
        base = Image.new('P', (shape[1], shape[0]), 0)
        base.putpalette(palette())
    draw = ImageDraw.Draw(base)
    for index, pose in enumerate(poses[:255], start=1):
        for a, b in TREE_EDGES:
            first, second = pose.joints[a], pose.joints[b]
            if first is not None and second is not None:
                draw.line([tuple(first.position), tuple(second.position)], fill=index, width=1)
        for kp in pose.present():
            x, y = kp.position
            draw.ellipse(
                [x - JOINT_RADIUS, y - JOINT_RADIUS, x + JOINT_RADIUS, y + JOINT_RADIUS],
                fill=index,
            )
    return base


def save_image(image, path):
    """PGM for grayscale images, PNG for paletted ones."""
    image_format = 'PPM' if image.mode == 'L' else 'PNG'
    image.save(path, format=image_format)
    logger.info('wrote %s image %s', image_format, path)
