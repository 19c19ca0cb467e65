"""
Target containers produced by the encoders.
"""
import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fields.core import DenseField, SubPixel


class CentroidMode(str, enum.Enum):
    STATIC = 'static'
    DYNAMIC = 'dynamic'


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class KeyCentroidField:
    """
    Per-joint displacement targets.

    ``base`` holds 2 channels per joint: channel 2j is dx and 2j+1 is dy,
    both q - p in pixels. ``valid_mask`` is a (J, H, W) boolean array marking
    pixels inside some disk of that joint. ``response`` is the Gaussian
    response map, exp(-|p - q|^2 / (2 sigma^2)) with sigma = radius / 3.
    """
    base: DenseField
    valid_mask: np.ndarray
    response: DenseField
    radius: float

    def __post_init__(self):
        object.__setattr__(self, 'valid_mask', _frozen(self.valid_mask, bool))
        joints = self.valid_mask.shape[0]
        if self.base.channels != 2 * joints or self.response.channels != joints:
            raise ValueError('KeyCentroidField needs 2 base channels and 1 response channel per joint')

    @property
    def num_joints(self):
        return self.valid_mask.shape[0]

    def displacement(self, joint):
        """(dx, dy) planes of one joint."""
        return self.base.channel(2 * joint), self.base.channel(2 * joint + 1)


@dataclass(frozen=True, eq=False)
class MaskCentroidSet:
    """One attraction point per instance, with its membership margin."""
    instance_ids: tuple
    centroids: np.ndarray
    sigmas: tuple
    mode: CentroidMode = CentroidMode.STATIC

    def __post_init__(self):
        object.__setattr__(self, 'instance_ids', tuple(int(i) for i in self.instance_ids))
        object.__setattr__(self, 'centroids', _frozen(np.reshape(self.centroids, (-1, 2)), np.float64))
        object.__setattr__(self, 'sigmas', tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, 'mode', CentroidMode(self.mode))
        if not len(self.instance_ids) == len(self.centroids) == len(self.sigmas):
            raise ValueError('instance_ids, centroids and sigmas must have equal length')
        if any(not s > 0 for s in self.sigmas):
            raise ValueError('sigma_j must be positive')

    def __len__(self):
        return len(self.instance_ids)

    def centroid(self, index):
        x, y = self.centroids[index]
        return SubPixel(float(x), float(y))

    def to_dict(self):
        return {
            'mode': self.mode.value,
            'instances': [
                {'instance_id': i, 'centroid': [float(x), float(y)], 'sigma': s}
                for i, (x, y), s in zip(self.instance_ids, self.centroids, self.sigmas)
            ],
        }

    @classmethod
    def from_dict(cls, payload):
        instances = payload['instances']
        return cls(
            instance_ids=[item['instance_id'] for item in instances],
            centroids=np.array([item['centroid'] for item in instances], dtype=np.float64).reshape(-1, 2),
            sigmas=[item['sigma'] for item in instances],
            mode=payload.get('mode', CentroidMode.STATIC.value),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class OffsetField:
    """
    Two-channel offset targets v = C - m on foreground pixels, zero on
    background. ``foreground`` is the (H, W) boolean support.
    """
    field: DenseField
    foreground: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'foreground', _frozen(self.foreground, bool))
        if self.field.channels != 2 or self.foreground.shape != self.field.shape[1:]:
            raise ValueError('OffsetField needs a 2-channel field matching its foreground')

    @property
    def shape(self):
        return self.field.shape

    @classmethod
    def from_field(cls, field):
        """Rebuild from a stored 3-channel (dx, dy, foreground) tensor."""
        if field.channels != 3:
            raise ValueError(f'expected 3 channels (dx, dy, foreground), got {field.channels}')
        return cls(DenseField(field.data[:2]), field.channel(2) > 0.5)

    def to_field(self):
        return DenseField(np.concatenate([self.field.data, self.foreground[np.newaxis]]))


@dataclass(frozen=True, eq=False)
class EncodedTargets:
    heatmaps: DenseField
    keycentroid: KeyCentroidField
    offsets: OffsetField
    centroids: MaskCentroidSet
    exclusion: DenseField
