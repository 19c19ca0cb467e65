"""
Dense field container and grid geometry.

Fields are stored planar (channel-major) as float32 arrays of shape
(channels, height, width). Coordinates follow x = column, y = row, origin
top-left, with pixel centres on integer coordinates.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)


class GridPoint(NamedTuple):
    """Integer pixel position."""
    x: int
    y: int


class SubPixel(NamedTuple):
    """Real-valued image position."""
    x: float
    y: float


class DenseField:
    """
    Immutable H x W x C grid of 32-bit reals, stored planar.

    Construction copies the input unless ``copy=False`` is passed, in which
    case the array is only wrapped in a read-only view. Every instance holds
    finite values only.
    """

    __slots__ = ('_data',)

    def __init__(self, data, copy=True):
        array = np.array(data, dtype=np.float32, copy=True) if copy else np.asarray(data, dtype=np.float32)
        if array.ndim == 2:
            array = array[np.newaxis]
        if array.ndim != 3:
            raise ValueError(f'DenseField expects a (C, H, W) array, got shape {array.shape}')
        if not np.isfinite(array).all():
            raise ValueError('DenseField values must be finite')
        view = array.view()
        view.flags.writeable = False
        self._data = view

    @classmethod
    def zeros(cls, channels, height, width):
        return cls(np.zeros((channels, height, width), dtype=np.float32), copy=False)

    @classmethod
    def from_mask(cls, mask):
        """Wrap a boolean (H, W) or (C, H, W) mask as a {0, 1} field."""
        return cls(np.asarray(mask, dtype=np.float32), copy=False)

    @property
    def data(self):
        return self._data

    @property
    def channels(self):
        return self._data.shape[0]

    @property
    def height(self):
        return self._data.shape[1]

    @property
    def width(self):
        return self._data.shape[2]

    @property
    def shape(self):
        return self._data.shape

    def channel(self, index):
        return self._data[index]

    def same_shape(self, other):
        return self.shape == other.shape

    def __len__(self):
        return self._data.size

    def __repr__(self):
        return f'DenseField(channels={self.channels}, height={self.height}, width={self.width})'


def check_radius(radius, name='R'):
    if not radius > 0:
        raise ValueError(f'{name} must be positive, got {radius}')


def disk_contains(p, q, radius):
    """True iff ||p - q|| <= radius (boundary inclusive)."""
    check_radius(radius)
    dx = float(p[0]) - float(q[0])
    dy = float(p[1]) - float(q[1])
    return dx * dx + dy * dy <= float(radius) * float(radius)


def disk_window(height, width, q, radius):
    """
    Pixel indices (ys, xs) of D_R(q) clipped to the grid.

    Only the bounding square of the disk is scanned, so the cost is
    independent of the grid size.
    """
    check_radius(radius)
    qx, qy = float(q[0]), float(q[1])
    x0 = max(int(np.ceil(qx - radius)), 0)
    x1 = min(int(np.floor(qx + radius)), width - 1)
    y0 = max(int(np.ceil(qy - radius)), 0)
    y1 = min(int(np.floor(qy + radius)), height - 1)
    if x1 < x0 or y1 < y0:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    inside = (xs - qx) ** 2 + (ys - qy) ** 2 <= radius * radius
    return ys[inside], xs[inside]


def disk_mask(height, width, q, radius):
    """Boolean (H, W) raster of D_R(q)."""
    mask = np.zeros((height, width), dtype=bool)
    ys, xs = disk_window(height, width, q, radius)
    mask[ys, xs] = True
    return mask


def pixel_grid(height, width):
    """Coordinate planes (xs, ys), each of shape (H, W)."""
    ys, xs = np.mgrid[0:height, 0:width]
    return xs, ys


def bilinear_sample(plane, x, y):
    """
    Sample a 2D plane at real positions; points off the grid read as zero.
    Accepts scalars or equally shaped arrays for ``x`` and ``y``.
    """
    plane = np.asarray(plane)
    height, width = plane.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0

    def tap(yy, xx):
        inside = (xx >= 0) & (xx < width) & (yy >= 0) & (yy < height)
        values = np.zeros(np.broadcast(yy, xx).shape, dtype=np.float64)
        values[inside] = plane[yy[inside], xx[inside]]
        return values

    x0 = np.atleast_1d(x0)
    y0 = np.atleast_1d(y0)
    fx = np.atleast_1d(fx)
    fy = np.atleast_1d(fy)
    result = (
        tap(y0, x0) * (1 - fx) * (1 - fy)
        + tap(y0, x0 + 1) * fx * (1 - fy)
        + tap(y0 + 1, x0) * (1 - fx) * fy
        + tap(y0 + 1, x0 + 1) * fx * fy
    )
    if np.ndim(x) == 0:
        return float(result[0])
    return result.reshape(np.shape(x))


def map_channels(func, items, workers=1):
    """
    Apply ``func`` to each item, in order, optionally on a thread pool.
    numpy and scipy.ndimage release the GIL, so threads give real speedup.
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
