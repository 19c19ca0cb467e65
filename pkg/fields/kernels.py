"""
Gaussian kernels and per-channel smoothing.

The point-wise and instance-wise Gaussian optimizations both reduce to
smoothing each channel with its own sigma. The discrete kernel is separable,
truncated at ceil(3 sigma) and renormalized; borders are zero-padded and the
result is divided by the kernel mass that fell inside the grid, so constant
fields stay constant.
"""
import logging
import math
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .core import DenseField, map_channels

logger = logging.getLogger(__name__)


def gaussian_kernel(x, y, sigma):
    """(1 / (2 pi sigma^2)) * exp(-(x^2 + y^2) / (2 sigma^2))."""
    if not sigma > 0:
        raise ValueError(f'sigma must be positive, got {sigma}')
    variance = sigma * sigma
    return math.exp(-(x * x + y * y) / (2.0 * variance)) / (2.0 * math.pi * variance)


@lru_cache(maxsize=64)
def kernel_1d(sigma):
    """Normalized 1D taps on [-ceil(3 sigma), ceil(3 sigma)]."""
    radius = max(int(math.ceil(3.0 * sigma)), 1)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-offsets ** 2 / (2.0 * sigma * sigma))
    weights /= weights.sum()
    weights.flags.writeable = False
    return weights


@lru_cache(maxsize=64)
def _border_mass(height, width, sigma):
    weights = kernel_1d(sigma)
    rows = ndimage.correlate1d(np.ones(height), weights, mode='constant', cval=0.0)
    cols = ndimage.correlate1d(np.ones(width), weights, mode='constant', cval=0.0)
    mass = np.outer(rows, cols).astype(np.float32)
    mass.flags.writeable = False
    return mass


def smooth_plane(plane, sigma):
    """Smooth one (H, W) plane; returns a new float32 array."""
    if not sigma > 0:
        raise ValueError(f'sigma must be positive, got {sigma}')
    weights = kernel_1d(float(sigma))
    out = ndimage.correlate1d(plane, weights, axis=0, mode='constant', cval=0.0, output=np.float32)
    out = ndimage.correlate1d(out, weights, axis=1, mode='constant', cval=0.0, output=np.float32)
    out /= _border_mass(plane.shape[0], plane.shape[1], float(sigma))
    return out


def smooth_gaussian(field, sigma_per_channel, workers=1):
    """
    Convolve each channel of ``field`` with its own normalized Gaussian.

    Dimensions are unchanged. Raises ValueError when the sigma list does not
    match the channel count or holds a non-positive value.
    """
    sigmas = [float(s) for s in sigma_per_channel]
    if len(sigmas) != field.channels:
        raise ValueError(
            f'expected {field.channels} sigma values, got {len(sigmas)}'
        )
    for sigma in sigmas:
        if not sigma > 0:
            raise ValueError(f'sigma must be positive, got {sigma}')

    planes = map_channels(
        lambda index: smooth_plane(field.channel(index), sigmas[index]),
        range(field.channels),
        workers=workers,
    )
    logger.debug('smoothed %d channels (workers=%s)', field.channels, workers)
    if not planes:
        return DenseField.zeros(0, field.height, field.width)
    return DenseField(np.stack(planes), copy=False)
