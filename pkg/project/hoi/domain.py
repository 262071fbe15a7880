"""
Plain data types shared across the pipeline: poses, frames and sequences.

Per-frame feature layout (208 values):
    [object 10 | left hand 99 | right hand 99]
Object pose: tau_o (3), phi_o (6), alpha_o (1).
Hand pose: tau (3), phi_wrist (6), 15 joint rotations (15 x 6).
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

OBJECT_WIDTH = 10
HAND_WIDTH = 99
FRAME_WIDTH = OBJECT_WIDTH + 2 * HAND_WIDTH
LEFT_SLICE = slice(OBJECT_WIDTH, OBJECT_WIDTH + HAND_WIDTH)
RIGHT_SLICE = slice(OBJECT_WIDTH + HAND_WIDTH, FRAME_WIDTH)
FINGER_JOINTS = 15
DEFAULT_FPS = 30

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class Handedness(str, Enum):
    LEFT = 'left'
    RIGHT = 'right'


@dataclass
class ObjectPose:
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())
    alpha: float = 0.0

    def __eq__(self, other):
        return (isinstance(other, ObjectPose)
                and np.array_equal(self.tau, other.tau)
                and np.array_equal(self.phi, other.phi)
                and self.alpha == other.alpha)


@dataclass
class HandPose:
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi_wrist: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())
    joint_rots: np.ndarray = field(default_factory=lambda: np.tile(IDENTITY_6D, (FINGER_JOINTS, 1)))
    handedness: Handedness = Handedness.RIGHT

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.tau, self.phi_wrist, np.asarray(self.joint_rots).reshape(-1)])

    def __eq__(self, other):
        return (isinstance(other, HandPose)
                and self.handedness == other.handedness
                and np.array_equal(self.as_vector(), other.as_vector()))


@dataclass
class HOIFrame:
    object_pose: ObjectPose
    left: HandPose
    right: HandPose


@dataclass
class HOISequence:
    """
    A motion clip: features (T, 208) float32 at a fixed frame rate, plus
    the object it manipulates and its caption.
    """
    features: np.ndarray
    object_id: str
    caption: str = ''
    fps: int = DEFAULT_FPS
    seed: int = 0
    grasp_frames: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    def object_channels(self) -> np.ndarray:
        return self.features[:, :OBJECT_WIDTH]

    def hand_channels(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.features[:, LEFT_SLICE], self.features[:, RIGHT_SLICE]

    def with_features(self, features: np.ndarray) -> 'HOISequence':
        return HOISequence(features=features, object_id=self.object_id, caption=self.caption,
                           fps=self.fps, seed=self.seed)


@dataclass(frozen=True)
class TokenTriple:
    """Codebook indices of one window: left hand, right hand, object."""
    left: int
    right: int
    obj: int

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.left, self.right, self.obj)


def triples_from_array(array: np.ndarray) -> List[TokenTriple]:
    return [TokenTriple(int(l), int(r), int(o)) for l, r, o in np.asarray(array).reshape(-1, 3)]
