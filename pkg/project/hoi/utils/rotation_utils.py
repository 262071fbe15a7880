"""
Rotation helpers: 6D encoding of rotation matrices, axis-angle matrices,
random rotations and orientation interpolation.
"""

from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp


def matrix_to_rot6d(matrix: np.ndarray) -> np.ndarray:
    """First two columns, column-major: [c0, c1] -> (..., 6)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return np.concatenate([matrix[..., :, 0], matrix[..., :, 1]], axis=-1)


def axis_angle_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * angle).as_matrix()


def random_rotations(rng: np.random.Generator, count: int) -> np.ndarray:
    """(count, 3, 3) rotations drawn uniformly from SO(3)."""
    return Rotation.random(count, rng).as_matrix().reshape(count, 3, 3)


def slerp_matrices(start: np.ndarray, end: np.ndarray, fractions: Sequence[float]) -> np.ndarray:
    """Spherical interpolation between two rotations at each fraction in [0, 1]."""
    keys = Rotation.from_matrix(np.stack([start, end]))
    return Slerp([0.0, 1.0], keys)(np.clip(np.asarray(fractions, dtype=np.float64), 0.0, 1.0)).as_matrix()


def smoothstep(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def yaw_matrix(angle: float) -> np.ndarray:
    return axis_angle_matrix([0.0, 0.0, 1.0], angle)
