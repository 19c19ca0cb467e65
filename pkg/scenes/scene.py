"""
Ground-truth scene types.
"""
from dataclasses import dataclass, field

import numpy as np

from .skeleton import NUM_JOINTS


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class PersonGT:
    """
    One annotated person: 17 sub-pixel keypoints with visibility and a
    binary body mask over the whole canvas.
    """
    instance_id: int
    keypoints: np.ndarray
    visible: np.ndarray
    mask: np.ndarray
    is_small: bool = False
    occlusion: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'keypoints', _frozen(self.keypoints, np.float64))
        object.__setattr__(self, 'visible', _frozen(self.visible, bool))
        object.__setattr__(self, 'mask', _frozen(self.mask, bool))
        if self.keypoints.shape != (NUM_JOINTS, 2) or self.visible.shape != (NUM_JOINTS,):
            raise ValueError('a person carries exactly 17 keypoints')

    @property
    def area(self):
        return int(self.mask.sum())

    @property
    def num_visible(self):
        return int(self.visible.sum())

    def mask_mean(self):
        """Mean (x, y) of mask pixels; the static MaskCentroid."""
        ys, xs = np.nonzero(self.mask)
        if xs.size == 0:
            raise ValueError(f'person {self.instance_id} has an empty mask')
        return float(xs.mean()), float(ys.mean())

    def bbox(self):
        """(x, y, w, h) of the mask, COCO convention."""
        ys, xs = np.nonzero(self.mask)
        if xs.size == 0:
            return (0.0, 0.0, 0.0, 0.0)
        return (float(xs.min()), float(ys.min()),
                float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


@dataclass(frozen=True, eq=False)
class Scene:
    height: int
    width: int
    persons: tuple = field(default_factory=tuple)
    image_id: int = 1
    achieved_overlap: float = None

    def __post_init__(self):
        object.__setattr__(self, 'persons', tuple(self.persons))

    def person(self, instance_id):
        for person in self.persons:
            if person.instance_id == instance_id:
                return person
        raise KeyError(f'no person with id {instance_id}')

    def owner_map(self):
        """
        (H, W) int array of person indices, -1 on background. Where masks
        overlap the earlier person owns the pixel.
        """
        owners = np.full((self.height, self.width), -1, dtype=np.int32)
        for index in reversed(range(len(self.persons))):
            owners[self.persons[index].mask] = index
        return owners

    def foreground(self):
        return self.owner_map() >= 0

    @property
    def max_occlusion(self):
        return max((p.occlusion for p in self.persons), default=0.0)
