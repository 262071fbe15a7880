"""
Kinematics service: 6D rotations, the parametric hand model and its forward
kinematics, convex object models with an optional hinge, and the flat
208-value frame layout.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import ConvexHull

from ..domain import (
    FRAME_WIDTH, HAND_WIDTH, LEFT_SLICE, OBJECT_WIDTH, RIGHT_SLICE,
    Handedness, HandPose, HOIFrame, ObjectPose,
)
from ..nn import tensor as T
from ..nn.tensor import Tensor
from ..utils.rotation_utils import axis_angle_matrix

logger = logging.getLogger(__name__)

DEGENERATE_TOLERANCE = 1e-9


class KinematicsError(Exception):
    """Custom exception for kinematics errors"""
    pass


class DegenerateRotation(KinematicsError):
    """6D rotation columns are zero or parallel"""
    pass


class LengthMismatch(KinematicsError):
    """Vector or sequence does not have the expected length"""
    pass


class ArticulationOutOfRange(KinematicsError):
    """Articulation angle outside [0, alpha_max]"""
    pass


class InvalidObjectModel(KinematicsError):
    """Object model failed a load-time check"""
    pass


class NonConvexPart(InvalidObjectModel):
    """A rigid part of the object is not convex"""
    pass


class UnknownObject(KinematicsError):
    """No primitive with that name"""
    pass


# ---------------------------------------------------------------------------
# 6D rotations
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r, safe: bool = False) -> np.ndarray:
    """
    Gram-Schmidt on the two stored columns; third column by cross product.

    Args:
        r: (..., 6) array, [first column | second column]
        safe: replace degenerate inputs with the identity instead of raising

    Returns:
        (..., 3, 3) rotation matrices

    Raises:
        DegenerateRotation: if a column is zero or the two are parallel
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise LengthMismatch(f"6D rotation must have 6 values, got shape {r.shape}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / np.where(n1 < DEGENERATE_TOLERANCE, 1.0, n1)
    u = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    bad = (n1[..., 0] < DEGENERATE_TOLERANCE) | (n2[..., 0] < DEGENERATE_TOLERANCE)
    if np.any(bad) and not safe:
        raise DegenerateRotation("6D rotation columns are zero or parallel")
    b2 = u / np.where(n2 < DEGENERATE_TOLERANCE, 1.0, n2)
    b3 = np.cross(b1, b2)
    matrix = np.stack([b1, b2, b3], axis=-1)
    if np.any(bad):
        matrix[bad] = np.eye(3)
    return matrix


def rot6d_from_matrix(matrix) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    return np.concatenate([matrix[..., :, 0], matrix[..., :, 1]], axis=-1)


def rot6d_to_matrix_tensor(r: Tensor, eps: float = 1e-12) -> Tensor:
    """Differentiable counterpart of rot6d_to_matrix over (..., 6)."""
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    b1 = T.l2_normalize(a1, axis=-1, eps=eps)
    projection = T.reduce_sum(T.mul(b1, a2), axis=-1, keepdims=True)
    b2 = T.l2_normalize(T.sub(a2, T.mul(projection, b1)), axis=-1, eps=eps)
    b3 = T.cross(b1, b2)
    return T.stack([b1, b2, b3], axis=-1)


# ---------------------------------------------------------------------------
# Hand model
# ---------------------------------------------------------------------------

FINGERS = ('thumb', 'index', 'middle', 'ring', 'pinky')

# Wrist-frame layout of a right hand: fingers along +x, thumb toward +y,
# palm facing -z. Curling a joint is a rotation about its local +y.
_MCP_OFFSETS = {
    'thumb': (0.025, 0.020, -0.012),
    'index': (0.085, 0.025, 0.0),
    'middle': (0.090, 0.005, 0.0),
    'ring': (0.085, -0.014, 0.0),
    'pinky': (0.075, -0.031, 0.0),
}
_FINGER_AXES = {
    'thumb': (0.7, 0.7, -0.15),
    'index': (1.0, 0.06, 0.0),
    'middle': (1.0, 0.0, 0.0),
    'ring': (1.0, -0.05, 0.0),
    'pinky': (1.0, -0.10, 0.0),
}
_BONE_LENGTHS = {
    'thumb': (0.038, 0.032, 0.027),
    'index': (0.042, 0.025, 0.021),
    'middle': (0.046, 0.028, 0.023),
    'ring': (0.043, 0.026, 0.021),
    'pinky': (0.034, 0.020, 0.018),
}
_BONE_RADII = {
    'thumb': (0.0100, 0.0095, 0.0090),
    'index': (0.0090, 0.0085, 0.0080),
    'middle': (0.0090, 0.0085, 0.0080),
    'ring': (0.0088, 0.0082, 0.0078),
    'pinky': (0.0080, 0.0075, 0.0070),
}
_PALM_RADIUS = 0.011
_SEGMENT_STEPS = (0.2, 0.5, 0.8)
_MIRROR_Y = np.diag([1.0, -1.0, 1.0])


@dataclass
class HandModel:
    """
    Sixteen-joint hand (wrist root, three joints per finger) with a
    sphere-swept surface sampled at fixed local points.
    """
    handedness: Handedness
    parents: np.ndarray
    offsets: np.ndarray
    bone_axes: np.ndarray
    bone_lengths: np.ndarray
    segment_radii: np.ndarray
    vertex_bones: np.ndarray
    vertex_local: np.ndarray

    @property
    def num_joints(self) -> int:
        return int(self.parents.shape[0])

    @property
    def num_vertices(self) -> int:
        return int(self.vertex_local.shape[0])

    def bone_groups(self) -> List[Tuple[int, slice]]:
        """Contiguous vertex ranges per rigid joint frame."""
        groups = []
        start = 0
        for bone in range(self.num_joints):
            count = int(np.sum(self.vertex_bones == bone))
            if count:
                groups.append((bone, slice(start, start + count)))
                start += count
        return groups


def _ring_directions(axis: np.ndarray) -> List[np.ndarray]:
    reference = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, reference)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    return [u, w, -u, -w]


def _segment_samples(start: np.ndarray, direction: np.ndarray, radius: float) -> List[np.ndarray]:
    axis = direction / np.linalg.norm(direction)
    rings = _ring_directions(axis)
    return [start + t * direction + radius * d for t in _SEGMENT_STEPS for d in rings]


def build_hand_model(handedness: Union[Handedness, str] = Handedness.RIGHT) -> HandModel:
    """Construct the rest-pose hand; the left hand mirrors the right across y."""
    handedness = Handedness(handedness)
    parents = np.zeros(16, dtype=np.int64)
    offsets = np.zeros((16, 3))
    axes = np.zeros((16, 3))
    lengths = np.zeros(15)
    radii = [_PALM_RADIUS] * len(FINGERS)
    per_bone: Dict[int, List[np.ndarray]] = {b: [] for b in range(16)}

    for f, finger in enumerate(FINGERS):
        axis = np.asarray(_FINGER_AXES[finger], dtype=np.float64)
        axis /= np.linalg.norm(axis)
        mcp = np.asarray(_MCP_OFFSETS[finger], dtype=np.float64)
        per_bone[0].extend(_segment_samples(np.zeros(3), mcp, _PALM_RADIUS))
        for k in range(3):
            joint = 1 + 3 * f + k
            parents[joint] = 0 if k == 0 else joint - 1
            offsets[joint] = mcp if k == 0 else axis * _BONE_LENGTHS[finger][k - 1]
            axes[joint] = axis
            lengths[joint - 1] = _BONE_LENGTHS[finger][k]
            radius = _BONE_RADII[finger][k]
            radii.append(radius)
            per_bone[joint].extend(_segment_samples(np.zeros(3), axis * lengths[joint - 1], radius))
            if k == 2:
                per_bone[joint].append(axis * (lengths[joint - 1] + 0.8 * radius))

    bones, local = [], []
    for bone in range(16):
        bones.extend([bone] * len(per_bone[bone]))
        local.extend(per_bone[bone])
    local = np.asarray(local)

    if handedness == Handedness.LEFT:
        offsets = offsets @ _MIRROR_Y
        axes = axes @ _MIRROR_Y
        local = local @ _MIRROR_Y

    return HandModel(
        handedness=handedness,
        parents=parents,
        offsets=offsets,
        bone_axes=axes,
        bone_lengths=lengths,
        segment_radii=np.asarray(radii),
        vertex_bones=np.asarray(bones, dtype=np.int64),
        vertex_local=local,
    )


_HAND_MODELS: Dict[Handedness, HandModel] = {}


def get_hand_model(handedness: Union[Handedness, str]) -> HandModel:
    handedness = Handedness(handedness)
    if handedness not in _HAND_MODELS:
        _HAND_MODELS[handedness] = build_hand_model(handedness)
    return _HAND_MODELS[handedness]


def rest_joint_positions(model: HandModel) -> np.ndarray:
    """Joint positions of the zero pose by plain offset accumulation."""
    positions = np.zeros((model.num_joints, 3))
    for joint in range(1, model.num_joints):
        positions[joint] = positions[model.parents[joint]] + model.offsets[joint]
    return positions


def curl_rotation(angle: float) -> np.ndarray:
    """Local joint rotation bending a finger toward the palm."""
    return axis_angle_matrix([0.0, 1.0, 0.0], angle)


def hand_forward_kinematics_tensor(poses, model: HandModel) -> Tuple[Tensor, Tensor]:
    """
    Batched forward kinematics recorded on the active tape.

    Args:
        poses: (N, 99) hand pose vectors
        model: hand model

    Returns:
        joints (N, 16, 3), vertices (N, V, 3)
    """
    poses = T.as_tensor(poses)
    if poses.ndim != 2 or poses.shape[-1] != HAND_WIDTH:
        raise LengthMismatch(f"Hand poses must be (N, {HAND_WIDTH}), got {poses.shape}")
    n = poses.shape[0]
    frames = [rot6d_to_matrix_tensor(poses[:, 3:9])]
    positions = [poses[:, 0:3]]
    local = rot6d_to_matrix_tensor(T.reshape(poses[:, 9:HAND_WIDTH], (n, 15, 6)))

    for joint in range(1, model.num_joints):
        parent = int(model.parents[joint])
        parent_frame = frames[parent]
        offset = model.offsets[joint].reshape(3, 1)
        step = T.reshape(T.matmul(parent_frame, offset), (n, 3))
        positions.append(T.add(positions[parent], step))
        frames.append(T.matmul(parent_frame, local[:, joint - 1]))

    joints = T.stack(positions, axis=1)
    groups = []
    for bone, span in model.bone_groups():
        rotated = T.matmul(model.vertex_local[span], T.swapaxes(frames[bone], -1, -2))
        groups.append(T.add(T.reshape(positions[bone], (n, 1, 3)), rotated))
    vertices = T.concat(groups, axis=1)
    return joints, vertices


def hand_forward_kinematics(pose: Union[HandPose, np.ndarray],
                            model: Optional[HandModel] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Joint positions and surface vertices for one pose (99,) or a batch (N, 99).

    Returns:
        joints (16, 3) and vertices (V, 3), or batched (N, ...) versions
    """
    if isinstance(pose, HandPose):
        model = model or get_hand_model(pose.handedness)
        vector = pose.as_vector()
    else:
        vector = np.asarray(pose, dtype=np.float64)
    if model is None:
        raise KinematicsError("A hand model is required for raw pose vectors")
    single = vector.ndim == 1
    if vector.shape[-1] != HAND_WIDTH:
        raise LengthMismatch(f"Hand pose must have {HAND_WIDTH} values, got {vector.shape[-1]}")
    batch = vector.reshape(-1, HAND_WIDTH).astype(np.float64)
    joints, vertices = hand_forward_kinematics_tensor(batch, model)
    if single:
        return joints.data[0], vertices.data[0]
    return joints.data, vertices.data


def both_hands_tensor(frames) -> Tuple[Tensor, Tensor]:
    """Joints (N, 32, 3) and vertices (N, 2V, 3) of left then right hand for (N, 208) frames."""
    frames = T.as_tensor(frames)
    left_joints, left_verts = hand_forward_kinematics_tensor(
        frames[:, LEFT_SLICE], get_hand_model(Handedness.LEFT))
    right_joints, right_verts = hand_forward_kinematics_tensor(
        frames[:, RIGHT_SLICE], get_hand_model(Handedness.RIGHT))
    return T.concat([left_joints, right_joints], axis=1), T.concat([left_verts, right_verts], axis=1)


def both_hands(frames: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    joints, vertices = both_hands_tensor(np.asarray(frames, dtype=np.float64).reshape(-1, FRAME_WIDTH))
    return joints.data, vertices.data


# ---------------------------------------------------------------------------
# Object model
# ---------------------------------------------------------------------------

@dataclass
class Hinge:
    axis: np.ndarray
    origin: np.ndarray
    alpha_max: float
    part: int = 1


@dataclass
class ConvexPart:
    """Half-space form: a point x is inside when normals @ x + offsets <= 0 everywhere."""
    normals: np.ndarray
    offsets: np.ndarray


@dataclass
class PosedObject:
    vertices: np.ndarray
    samples: np.ndarray
    parts: List[ConvexPart]


@dataclass
class ObjectModel:
    name: str
    vertices: np.ndarray
    faces: np.ndarray
    face_parts: np.ndarray
    hinge: Optional[Hinge] = None
    sample_count: int = 600
    point_count: int = 512
    seed: int = 0
    samples: np.ndarray = field(default=None, repr=False)
    sample_parts: np.ndarray = field(default=None, repr=False)
    point_cloud: np.ndarray = field(default=None, repr=False)
    parts: List[ConvexPart] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.face_parts = np.asarray(self.face_parts, dtype=np.int64)
        validate_object_model(self)
        self.parts = [self._part_planes(p) for p in range(self.num_parts)]
        if self.samples is None:
            self.samples, self.sample_parts = self._surface_samples()
        if self.point_cloud is None:
            self.point_cloud = self._area_samples(self.point_count, np.random.default_rng([self.seed, 1]))[0]

    @property
    def num_parts(self) -> int:
        return int(self.face_parts.max()) + 1

    @property
    def alpha_max(self) -> float:
        return float(self.hinge.alpha_max) if self.hinge is not None else 0.0

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        normals = np.cross(b - a, c - a)
        return normals / np.linalg.norm(normals, axis=1, keepdims=True)

    def vertex_parts(self) -> np.ndarray:
        parts = np.zeros(len(self.vertices), dtype=np.int64)
        for face, part in zip(self.faces, self.face_parts):
            parts[face] = part
        return parts

    def _part_planes(self, part: int) -> ConvexPart:
        mask = self.face_parts == part
        normals = self.face_normals()[mask]
        anchors = self.vertices[self.faces[mask, 0]]
        return ConvexPart(normals=normals, offsets=-np.sum(normals * anchors, axis=1))

    def _triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def _area_samples(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        if count <= 0:
            return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        areas = self._triangle_areas()
        chosen = rng.choice(len(self.faces), size=count, p=areas / areas.sum())
        u, v = rng.random(count), rng.random(count)
        flip = u + v > 1.0
        u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
        a, b, c = (self.vertices[self.faces[chosen, i]] for i in range(3))
        points = a + u[:, None] * (b - a) + v[:, None] * (c - a)
        return points, self.face_parts[chosen]

    def facet_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Area-weighted centroid of every planar facet (coplanar triangles merged)."""
        normals = self.face_normals()
        areas = self._triangle_areas()
        centroids = self.vertices[self.faces].mean(axis=1)
        offsets = -np.sum(normals * self.vertices[self.faces[:, 0]], axis=1)
        keys: Dict[tuple, List[int]] = {}
        for i in range(len(self.faces)):
            key = (int(self.face_parts[i]),) + tuple(np.round(normals[i], 6)) + (round(float(offsets[i]), 6),)
            keys.setdefault(key, []).append(i)
        centers, parts = [], []
        for members in keys.values():
            weights = areas[members]
            centers.append((centroids[members] * weights[:, None]).sum(axis=0) / weights.sum())
            parts.append(self.face_parts[members[0]])
        return np.asarray(centers), np.asarray(parts, dtype=np.int64)

    def _surface_samples(self) -> Tuple[np.ndarray, np.ndarray]:
        centers, center_parts = self.facet_centers()
        points = [self.vertices, centers]
        parts = [self.vertex_parts(), center_parts]
        extra = self.sample_count - len(self.vertices) - len(centers)
        if extra > 0:
            sampled, sampled_parts = self._area_samples(extra, np.random.default_rng([self.seed, 0]))
            points.append(sampled)
            parts.append(sampled_parts)
        return np.concatenate(points), np.concatenate(parts)


def validate_object_model(model: ObjectModel) -> None:
    """
    Load-time checks: every part is closed, consistently oriented with
    outward normals, and convex.

    Raises:
        InvalidObjectModel, NonConvexPart
    """
    if model.faces.ndim != 2 or model.faces.shape[1] != 3 or len(model.faces) == 0:
        raise InvalidObjectModel(f"Object '{model.name}' has no triangular faces")
    if model.faces.min() < 0 or model.faces.max() >= len(model.vertices):
        raise InvalidObjectModel(f"Object '{model.name}' references a missing vertex")
    if len(model.face_parts) != len(model.faces):
        raise InvalidObjectModel(f"Object '{model.name}' needs one part label per face")

    a, b, c = (model.vertices[model.faces[:, i]] for i in range(3))
    if np.any(np.linalg.norm(np.cross(b - a, c - a), axis=1) < 1e-15):
        raise InvalidObjectModel(f"Object '{model.name}' has a degenerate face")

    for part in np.unique(model.face_parts):
        faces = model.faces[model.face_parts == part]
        edges: Dict[Tuple[int, int], int] = {}
        for tri in faces:
            for i in range(3):
                edge = (int(tri[i]), int(tri[(i + 1) % 3]))
                edges[edge] = edges.get(edge, 0) + 1
        for (u, v), count in edges.items():
            if count != 1 or edges.get((v, u), 0) != 1:
                raise InvalidObjectModel(
                    f"Object '{model.name}' part {part} is not watertight at edge ({u}, {v})"
                )

        pa, pb, pc = (model.vertices[faces[:, i]] for i in range(3))
        volume = np.sum(pa * np.cross(pb, pc)) / 6.0
        if volume <= 0:
            raise InvalidObjectModel(f"Object '{model.name}' part {part} has inward-facing normals")

        normals = np.cross(pb - pa, pc - pa)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        offsets = -np.sum(normals * pa, axis=1)
        used = np.unique(faces)
        signed = model.vertices[used] @ normals.T + offsets
        if signed.max() > 1e-9:
            raise NonConvexPart(f"Object '{model.name}' part {part} is not convex")

    if model.hinge is not None and model.hinge.alpha_max < 0:
        raise InvalidObjectModel(f"Object '{model.name}' has a negative articulation range")


def _hull_mesh(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Convex hull vertices and outward-oriented triangles."""
    hull = ConvexHull(points)
    index = {int(v): i for i, v in enumerate(hull.vertices)}
    vertices = points[hull.vertices]
    faces = []
    for simplex, equation in zip(hull.simplices, hull.equations):
        tri = [index[int(v)] for v in simplex]
        a, b, c = vertices[tri]
        if np.dot(np.cross(b - a, c - a), equation[:3]) < 0:
            tri = [tri[0], tri[2], tri[1]]
        faces.append(tri)
    return vertices, np.asarray(faces, dtype=np.int64)


def _box_points(half: Sequence[float], center=(0.0, 0.0, 0.0)) -> np.ndarray:
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    return signs * np.asarray(half) + np.asarray(center)


def _sphere_points(radius: float, count: int = 96) -> np.ndarray:
    i = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / count)
    azimuth = np.pi * (1.0 + 5 ** 0.5) * i
    return radius * np.stack([np.cos(azimuth) * np.sin(polar),
                              np.sin(azimuth) * np.sin(polar),
                              np.cos(polar)], axis=1)


def _cylinder_points(radius: float, height: float, sides: int = 16) -> np.ndarray:
    angles = 2 * np.pi * np.arange(sides) / sides
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    return np.concatenate([np.column_stack([ring, np.full(sides, z)]) for z in (-height / 2, height / 2)])


def _capsule_points(radius: float, length: float, sides: int = 16, bands: int = 4) -> np.ndarray:
    angles = 2 * np.pi * np.arange(sides) / sides
    points = []
    for sign in (-1.0, 1.0):
        for k in range(bands):
            lat = (np.pi / 2) * k / bands
            r = radius * np.cos(lat)
            z = sign * (length / 2 + radius * np.sin(lat))
            points.append(np.column_stack([r * np.cos(angles), r * np.sin(angles), np.full(sides, z)]))
        points.append(np.array([[0.0, 0.0, sign * (length / 2 + radius)]]))
    return np.concatenate(points)


OBJECT_CAPTION_NAMES = {
    'cube': 'cube',
    'sphere': 'sphere',
    'cylinder': 'cylinder',
    'capsule': 'capsule',
    'hinged_box': 'hinged box',
}


def build_object_model(name: str, sample_count: int = 600, point_count: int = 512,
                       seed: int = 0) -> ObjectModel:
    """
    Construct one of the primitive objects in canonical pose (centered at the origin).

    Raises:
        UnknownObject: if name is not a known primitive
    """
    hinge = None
    if name == 'cube':
        vertices, faces = _hull_mesh(_box_points((0.04, 0.04, 0.04)))
        parts = np.zeros(len(faces), dtype=np.int64)
    elif name == 'sphere':
        vertices, faces = _hull_mesh(_sphere_points(0.04))
        parts = np.zeros(len(faces), dtype=np.int64)
    elif name == 'cylinder':
        vertices, faces = _hull_mesh(_cylinder_points(0.035, 0.10))
        parts = np.zeros(len(faces), dtype=np.int64)
    elif name == 'capsule':
        vertices, faces = _hull_mesh(_capsule_points(0.03, 0.06))
        parts = np.zeros(len(faces), dtype=np.int64)
    elif name == 'hinged_box':
        base_v, base_f = _hull_mesh(_box_points((0.05, 0.04, 0.03)))
        lid_v, lid_f = _hull_mesh(_box_points((0.05, 0.04, 0.005), center=(0.0, 0.0, 0.035)))
        vertices = np.concatenate([base_v, lid_v])
        faces = np.concatenate([base_f, lid_f + len(base_v)])
        parts = np.concatenate([np.zeros(len(base_f), dtype=np.int64), np.ones(len(lid_f), dtype=np.int64)])
        hinge = Hinge(axis=np.array([1.0, 0.0, 0.0]), origin=np.array([0.0, -0.04, 0.03]),
                      alpha_max=2.0, part=1)
    else:
        raise UnknownObject(f"Unknown object primitive '{name}'")
    return ObjectModel(name=name, vertices=vertices, faces=faces, face_parts=parts, hinge=hinge,
                       sample_count=sample_count, point_count=point_count, seed=seed)


def save_object_model(model: ObjectModel, path: Union[str, Path]) -> None:
    """Write the text mesh format: v / f / hinge / points / samples / seed lines."""
    lines = ['# hoi object model', f'object {model.name}']
    lines.extend(f'v {x!r} {y!r} {z!r}' for x, y, z in model.vertices.tolist())
    lines.extend(f'f {a} {b} {c} {p}' for (a, b, c), p in zip(model.faces.tolist(), model.face_parts.tolist()))
    if model.hinge is not None:
        h = model.hinge
        values = list(h.axis.tolist()) + list(h.origin.tolist()) + [float(h.alpha_max)]
        lines.append('hinge ' + ' '.join(repr(float(v)) for v in values) + f' {h.part}')
    lines.append(f'points {model.point_count}')
    lines.append(f'samples {model.sample_count}')
    lines.append(f'seed {model.seed}')
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def load_object_model(path: Union[str, Path]) -> ObjectModel:
    """
    Parse and validate an object model file.

    Raises:
        InvalidObjectModel: unreadable line, or a failed mesh check
    """
    name, vertices, faces, parts, hinge = Path(path).stem, [], [], [], None
    counts = {'points': 512, 'samples': 600, 'seed': 0}
    for number, raw in enumerate(Path(path).read_text(encoding='utf-8').splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        tag, *rest = line.split()
        try:
            if tag == 'object':
                name = rest[0]
            elif tag == 'v':
                vertices.append([float(x) for x in rest[:3]])
            elif tag == 'f':
                faces.append([int(x) for x in rest[:3]])
                parts.append(int(rest[3]) if len(rest) > 3 else 0)
            elif tag == 'hinge':
                values = [float(x) for x in rest[:7]]
                hinge = Hinge(axis=np.array(values[:3]), origin=np.array(values[3:6]),
                              alpha_max=values[6], part=int(rest[7]) if len(rest) > 7 else 1)
            elif tag in counts:
                counts[tag] = int(rest[0])
            else:
                raise ValueError(f"unknown tag '{tag}'")
        except (ValueError, IndexError) as e:
            raise InvalidObjectModel(f"{path}:{number}: {e}")
    return ObjectModel(name=name, vertices=np.asarray(vertices), faces=np.asarray(faces),
                       face_parts=np.asarray(parts), hinge=hinge, sample_count=counts['samples'],
                       point_count=counts['points'], seed=counts['seed'])


def _check_alpha(model: ObjectModel, alpha: np.ndarray, clamp: bool) -> np.ndarray:
    if clamp:
        return np.clip(alpha, 0.0, model.alpha_max)
    if np.any(alpha < -1e-9) or np.any(alpha > model.alpha_max + 1e-9):
        raise ArticulationOutOfRange(
            f"Articulation {float(np.max(np.abs(alpha)))} outside [0, {model.alpha_max}] for '{model.name}'"
        )
    return np.clip(alpha, 0.0, model.alpha_max)


def _transform_planes(part: ConvexPart, rotation: np.ndarray, translation: np.ndarray) -> ConvexPart:
    """Per-frame planes (F, k) after y = R x + t with R (F, 3, 3) and t (F, 3)."""
    normals = np.einsum('fij,fkj->fki', rotation, part.normals)
    offsets = part.offsets - np.einsum('fki,fi->fk', normals, translation)
    return ConvexPart(normals=normals, offsets=offsets)


def pose_object_batch(model: ObjectModel, poses: np.ndarray, clamp: bool = False) -> PosedObject:
    """
    Pose the object for every frame of (F, 10) object channels.

    Returns:
        PosedObject with vertices (F, n, 3), samples (F, S, 3) and parts
        whose normals are (F, k, 3) and offsets (F, k)
    """
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, OBJECT_WIDTH)
    frames = poses.shape[0]
    rotation = rot6d_to_matrix(poses[:, 3:9], safe=clamp)
    translation = poses[:, 0:3]
    alpha = _check_alpha(model, poses[:, 9], clamp)

    vertex_parts = model.vertex_parts()
    vertices = np.broadcast_to(model.vertices, (frames,) + model.vertices.shape).copy()
    samples = np.broadcast_to(model.samples, (frames,) + model.samples.shape).copy()
    parts = []
    for index, part in enumerate(model.parts):
        part = ConvexPart(normals=np.broadcast_to(part.normals, (frames,) + part.normals.shape),
                          offsets=np.broadcast_to(part.offsets, (frames,) + part.offsets.shape))
        if model.hinge is not None and index == model.hinge.part:
            hinge_rot = np.stack([axis_angle_matrix(model.hinge.axis, a) for a in alpha])
            origin = model.hinge.origin
            hinge_shift = origin - hinge_rot @ origin
            for points, labels in ((vertices, vertex_parts), (samples, model.sample_parts)):
                mask = labels == index
                points[:, mask] = np.einsum('fij,fnj->fni', hinge_rot, points[:, mask]) + hinge_shift[:, None, :]
            part = _transform_planes(part, hinge_rot, hinge_shift)
        parts.append(_transform_planes(part, rotation, translation))

    vertices = np.einsum('fij,fnj->fni', rotation, vertices) + translation[:, None, :]
    samples = np.einsum('fij,fnj->fni', rotation, samples) + translation[:, None, :]
    return PosedObject(vertices=vertices, samples=samples, parts=parts)


def pose_object(model: ObjectModel, pose: Union[ObjectPose, np.ndarray], clamp: bool = False) -> PosedObject:
    """Single-frame posing; arrays drop the frame axis."""
    vector = object_pose_vector(pose) if isinstance(pose, ObjectPose) else np.asarray(pose, dtype=np.float64)
    if vector.shape[-1] != OBJECT_WIDTH:
        raise LengthMismatch(f"Object pose must have {OBJECT_WIDTH} values, got {vector.shape}")
    batch = pose_object_batch(model, vector.reshape(1, OBJECT_WIDTH), clamp)
    return PosedObject(vertices=batch.vertices[0], samples=batch.samples[0],
                       parts=[ConvexPart(p.normals[0], p.offsets[0]) for p in batch.parts])


def apply_object_pose(model: ObjectModel, pose: Union[ObjectPose, np.ndarray]) -> np.ndarray:
    """Posed mesh vertices: hinge rotation on the moving part, then the global transform."""
    return pose_object(model, pose).vertices


# ---------------------------------------------------------------------------
# Frame layout
# ---------------------------------------------------------------------------

def object_pose_vector(pose: ObjectPose) -> np.ndarray:
    return np.concatenate([np.asarray(pose.tau, dtype=np.float64),
                           np.asarray(pose.phi, dtype=np.float64),
                           [float(pose.alpha)]])


def flatten_frame(frame: HOIFrame) -> np.ndarray:
    """[object 10 | left hand 99 | right hand 99] as float64."""
    vector = np.concatenate([
        object_pose_vector(frame.object_pose),
        np.asarray(frame.left.as_vector(), dtype=np.float64),
        np.asarray(frame.right.as_vector(), dtype=np.float64),
    ])
    if vector.shape[0] != FRAME_WIDTH:
        raise LengthMismatch(f"Frame flattened to {vector.shape[0]} values, expected {FRAME_WIDTH}")
    return vector


def _hand_from_vector(values: np.ndarray, handedness: Handedness) -> HandPose:
    return HandPose(tau=values[0:3].copy(), phi_wrist=values[3:9].copy(),
                    joint_rots=values[9:HAND_WIDTH].reshape(15, 6).copy(), handedness=handedness)


def unflatten_frame(vector) -> HOIFrame:
    vector = np.asarray(vector)
    if vector.ndim != 1 or vector.shape[0] != FRAME_WIDTH:
        raise LengthMismatch(f"Frame vector must have {FRAME_WIDTH} values, got shape {vector.shape}")
    obj = ObjectPose(tau=vector[0:3].copy(), phi=vector[3:9].copy(), alpha=vector[9].item())
    return HOIFrame(
        object_pose=obj,
        left=_hand_from_vector(vector[LEFT_SLICE], Handedness.LEFT),
        right=_hand_from_vector(vector[RIGHT_SLICE], Handedness.RIGHT),
    )
