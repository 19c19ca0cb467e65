"""
Embedding, membership and instance types, and the COCO segmentation-results
format.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from fields.core import DenseField
from poses.keypoints import PersonPose
from scenes.coco import CATEGORY_ID, decode_rle, encode_rle


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class PixelEmbeddings:
    """
    Foreground pixels and the point each one embeds to, e = m + v.

    ``points`` is an (n, 2) array of (x, y) rows aligned with ``ys``/``xs``.
    """
    ys: np.ndarray
    xs: np.ndarray
    points: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        object.__setattr__(self, 'ys', _frozen(self.ys, np.intp))
        object.__setattr__(self, 'xs', _frozen(self.xs, np.intp))
        object.__setattr__(self, 'points', _frozen(np.reshape(self.points, (-1, 2)), np.float64))
        if not self.ys.shape == self.xs.shape == self.points.shape[:1]:
            raise ValueError('pixel indices and embedding points must align')

    def __len__(self):
        return self.points.shape[0]

    @property
    def foreground(self):
        mask = np.zeros((self.height, self.width), dtype=bool)
        mask[self.ys, self.xs] = True
        return mask

    def scatter(self, values, fill=0.0):
        """(H, W) plane holding ``values`` at the foreground pixels."""
        plane = np.full((self.height, self.width), fill, dtype=np.float32)
        plane[self.ys, self.xs] = values
        return plane


@dataclass(frozen=True, eq=False)
class MembershipMap:
    """
    Per-instance membership probabilities, one channel per instance, over a
    foreground support. Values are finite and lie in [0, 1].
    """
    instance_ids: tuple
    field: DenseField
    foreground: np.ndarray
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'instance_ids', tuple(int(i) for i in self.instance_ids))
        object.__setattr__(self, 'foreground', _frozen(self.foreground, bool))
        if len(self.instance_ids) != self.field.channels:
            raise ValueError('one membership channel per instance id is required')
        if self.foreground.shape != self.field.shape[1:]:
            raise ValueError('foreground does not match the membership field')
        data = self.field.data
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError('membership values must lie in [0, 1]')

    def __len__(self):
        return len(self.instance_ids)

    def channel(self, index):
        return self.field.channel(index)


@dataclass(frozen=True, eq=False)
class InstanceResult:
    """A decoded person: a pose, a mask, or both."""
    pose: Optional[PersonPose]
    mask: Optional[np.ndarray]
    membership: Optional[np.ndarray]
    score: float

    def __post_init__(self):
        if self.pose is None and self.mask is None:
            raise ValueError('an instance needs a pose or a mask')
        if self.mask is not None:
            object.__setattr__(self, 'mask', _frozen(self.mask, bool))

    @property
    def area(self):
        return 0 if self.mask is None else int(self.mask.sum())

    def bbox(self):
        ys, xs = np.nonzero(self.mask)
        return (float(xs.min()), float(ys.min()),
                float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def segmentation_result(instance, image_id):
    return {
        'image_id': image_id,
        'category_id': CATEGORY_ID,
        'segmentation': encode_rle(instance.mask),
        'area': instance.area,
        'bbox': list(instance.bbox()),
        'score': float(instance.score),
    }


def write_results(results_by_image, path):
    """Instances without a mask are left out of the file."""
    payload = [
        segmentation_result(instance, image_id)
        for image_id in sorted(results_by_image)
        for instance in results_by_image[image_id]
        if instance.mask is not None
    ]
    Path(path).write_text(json.dumps(payload, sort_keys=True))
    return payload


def read_results(path):
    """{image_id: [InstanceResult]} with masks and scores only."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f'{path} is not valid JSON: {exc}') from exc
    if not isinstance(payload, list):
        raise ValueError(f'{path} must hold a list of segmentation results')
    results = {}
    for item in payload:
        instance = InstanceResult(None, decode_rle(item['segmentation']), None, float(item['score']))
        results.setdefault(item['image_id'], []).append(instance)
    return results
