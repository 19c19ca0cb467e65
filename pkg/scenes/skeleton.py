"""
COCO 17-joint skeleton with a kinematic tree and per-joint variance classes.
"""
import enum
from collections import deque
from dataclasses import dataclass


class VarianceClass(str, enum.Enum):
    HVK = 'HVK'
    LVK = 'LVK'


JOINT_NAMES = (
    'nose',
    'left_eye', 'right_eye',
    'left_ear', 'right_ear',
    'left_shoulder', 'right_shoulder',
    'left_elbow', 'right_elbow',
    'left_wrist', 'right_wrist',
    'left_hip', 'right_hip',
    'left_knee', 'right_knee',
    'left_ankle', 'right_ankle',
)

NUM_JOINTS = len(JOINT_NAMES)

# Tree rooted at the nose: face, shoulders, arms, torso sides, legs
TREE_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 4),
    (0, 5), (0, 6),
    (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12),
    (11, 13), (13, 15), (12, 14), (14, 16),
)

HIGH_VARIANCE = frozenset(
    JOINT_NAMES.index(name)
    for name in ('left_wrist', 'right_wrist', 'left_ankle', 'right_ankle',
                 'left_elbow', 'right_elbow', 'left_knee', 'right_knee')
)


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple
    edges: tuple
    variance: tuple

    def __post_init__(self):
        count = len(self.joint_names)
        if len(self.variance) != count:
            raise ValueError('one variance class per joint is required')
        if len(self.edges) != count - 1:
            raise ValueError('a kinematic tree over n joints has n - 1 edges')
        seen = self._reachable(0)
        if len(seen) != count:
            raise ValueError('skeleton edges must connect every joint')

    @property
    def num_joints(self):
        return len(self.joint_names)

    def neighbours(self, joint):
        result = []
        for a, b in self.edges:
            if a == joint:
                result.append(b)
            elif b == joint:
                result.append(a)
        return sorted(result)

    def _reachable(self, root):
        seen = {root}
        queue = deque([root])
        while queue:
            joint = queue.popleft()
            for other in self.neighbours(joint):
                if other not in seen:
                    seen.add(other)
                    queue.append(other)
        return seen

    def walk(self, root):
        """Breadth-first (parent, child) pairs covering the tree from ``root``."""
        seen = {root}
        queue = deque([root])
        order = []
        while queue:
            joint = queue.popleft()
            for other in self.neighbours(joint):
                if other not in seen:
                    seen.add(other)
                    order.append((joint, other))
                    queue.append(other)
        return order

    def is_high_variance(self, joint):
        return self.variance[joint] == VarianceClass.HVK

    def sigmas(self, sigma_hvk, sigma_lvk):
        """Per-channel sigma list for point-wise smoothing."""
        return [sigma_hvk if self.is_high_variance(j) else sigma_lvk for j in range(self.num_joints)]


COCO_SKELETON = Skeleton(
    joint_names=JOINT_NAMES,
    edges=TREE_EDGES,
    variance=tuple(
        VarianceClass.HVK if j in HIGH_VARIANCE else VarianceClass.LVK
        for j in range(NUM_JOINTS)
    ),
)
