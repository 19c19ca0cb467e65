"""
Keypoint and pose types, and the COCO keypoint-results format.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from fields.core import GridPoint, SubPixel
from scenes.skeleton import NUM_JOINTS

CATEGORY_ID = 1


class KeypointCandidate(NamedTuple):
    joint: int
    position: GridPoint
    raw_score: float


class RefinedKeypoint(NamedTuple):
    joint: int
    position: SubPixel
    confidence: float
    votes: int
    source: Optional[GridPoint] = None


@dataclass(frozen=True, eq=False)
class PersonPose:
    """
    One assembled skeleton. ``joints`` has one slot per joint, None where
    nothing was detected.
    """
    joints: tuple
    instance_score: float

    def __post_init__(self):
        object.__setattr__(self, 'joints', tuple(self.joints))
        if len(self.joints) != NUM_JOINTS:
            raise ValueError(f'a pose has {NUM_JOINTS} joint slots, got {len(self.joints)}')
        if not any(kp is not None for kp in self.joints):
            raise ValueError('a pose needs at least one joint')

    @classmethod
    def from_joints(cls, joints):
        """Pose scored by the mean confidence of its present joints."""
        present = [kp.confidence for kp in joints if kp is not None]
        return cls(joints, float(np.mean(present)))

    def present(self):
        return [kp for kp in self.joints if kp is not None]

    @property
    def num_present(self):
        return len(self.present())

    def high_confidence_joint(self):
        """The most confident present joint; ties go to the lower joint id."""
        return max(self.present(), key=lambda kp: (kp.confidence, -kp.joint))

    def keypoint_array(self):
        """(17, 3) rows of x, y, confidence; zeros for missing joints."""
        rows = np.zeros((NUM_JOINTS, 3))
        for kp in self.present():
            rows[kp.joint] = (kp.position.x, kp.position.y, kp.confidence)
        return rows

    def with_score(self, score):
        return PersonPose(self.joints, float(score))


def pose_result(pose, image_id):
    return {
        'image_id': image_id,
        'category_id': CATEGORY_ID,
        'keypoints': [float(v) for v in pose.keypoint_array().ravel()],
        'score': float(pose.instance_score),
    }


def result_pose(result):
    """Inverse of pose_result; joints with zero confidence read as missing."""
    rows = np.asarray(result['keypoints'], dtype=np.float64).reshape(NUM_JOINTS, 3)
    joints = [
        RefinedKeypoint(j, SubPixel(float(x), float(y)), float(c), 1) if c > 0 else None
        for j, (x, y, c) in enumerate(rows)
    ]
    return PersonPose(joints, float(result['score']))


def write_results(results_by_image, path):
    """``results_by_image`` maps image id to a list of poses."""
    payload = [
        pose_result(pose, image_id)
        for image_id in sorted(results_by_image)
        for pose in results_by_image[image_id]
    ]
    Path(path).write_text(json.dumps(payload, sort_keys=True))
    return payload


def read_results(path):
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f'{path} is not valid JSON: {exc}') from exc
    if not isinstance(payload, list):
        raise ValueError(f'{path} must hold a list of keypoint results')
    results = {}
    for item in payload:
        results.setdefault(item['image_id'], []).append(result_pose(item))
    return results
