"""
Geometry service: hand-object distance queries, the penetration,
contact-grasp and contact-region losses, their weighted sum and the
interpenetration metric.

Distances are squared everywhere; the phi and tau radii are compared as
phi**2 and tau**2. The object surface is its posed sample set.
"""

import csv
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..domain import FRAME_WIDTH, OBJECT_WIDTH
from ..nn import tensor as T
from ..nn.tensor import Tensor
from .kinematics_service import (
    ConvexPart, ObjectModel, PosedObject, both_hands, both_hands_tensor, pose_object_batch,
)

logger = logging.getLogger(__name__)


class GeometryError(Exception):
    """Custom exception for geometry errors"""
    pass


class EmptyVertexSet(GeometryError):
    """Distance query against no vertices"""
    pass


class GeometryLengthMismatch(GeometryError):
    """Aligned vertex arrays differ in length"""
    pass


@dataclass(frozen=True)
class ContactThresholds:
    phi_approach: float = 0.02
    tau_contact: float = 0.005

    def __post_init__(self):
        if self.phi_approach <= 0 or self.tau_contact <= 0:
            raise GeometryError("Contact thresholds must be positive")
        if self.tau_contact > self.phi_approach:
            raise GeometryError("tau_contact must not exceed phi_approach")


@dataclass(frozen=True)
class GeoWeights:
    lambda_pen: float = 0.2
    beta_c: float = 0.5
    gamma_r: float = 1.0

    def __post_init__(self):
        if min(self.lambda_pen, self.beta_c, self.gamma_r) < 0:
            raise GeometryError("Geometry loss weights must be nonnegative")

    def scaled(self, factor: float) -> 'GeoWeights':
        return GeoWeights(self.lambda_pen * factor, self.beta_c * factor, self.gamma_r * factor)


@dataclass
class GeoReport:
    l_pen: float = 0.0
    l_c: float = 0.0
    l_r: float = 0.0
    l_geo: float = 0.0
    penetrating_vertex_count: int = 0
    max_depth: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


GEO_REPORT_COLUMNS = ('seq_id', 'l_pen', 'l_c', 'l_r', 'l_geo', 'iv_count', 'iv_max_depth')


def write_geo_report(path: Union[str, Path], reports: Sequence[Tuple[str, GeoReport]]) -> None:
    """One CSV row per sequence, in the order given."""
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(GEO_REPORT_COLUMNS)
        for seq_id, report in reports:
            writer.writerow([seq_id, repr(report.l_pen), repr(report.l_c), repr(report.l_r), repr(report.l_geo),
                             report.penetrating_vertex_count, repr(report.max_depth)])
    logger.info(f"Wrote geometry report for {len(reports)} sequences to {path}")


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def squared_distances(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Pairwise squared distances (..., P, V) by explicit differences."""
    diff = points[..., :, None, :] - verts[..., None, :, :]
    return np.sum(diff * diff, axis=-1)


def nearest_vertices(points: np.ndarray, verts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Minimum squared distance and argmin index (lowest index on ties) per point."""
    verts = np.asarray(verts, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if verts.shape[-2] == 0:
        raise EmptyVertexSet("Vertex set is empty")
    if points.ndim == 3:
        # One frame at a time keeps the (P, V, 3) difference tensor small.
        frames = [nearest_vertices(points[f], verts[f] if verts.ndim == 3 else verts)
                  for f in range(points.shape[0])]
        return np.stack([d for d, _ in frames]), np.stack([i for _, i in frames])
    dist = squared_distances(points, verts)
    index = np.argmin(dist, axis=-1)
    return np.take_along_axis(dist, index[..., None], axis=-1)[..., 0], index


def min_sq_dist_to_vertices(point, verts) -> Tuple[float, int]:
    """
    Squared distance from one point to its closest vertex.

    Raises:
        EmptyVertexSet: if verts is empty
    """
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    dist, index = nearest_vertices(np.asarray(point, dtype=np.float64).reshape(1, 3), verts)
    return float(dist[0]), int(index[0])


def signed_depths(points: np.ndarray, part: ConvexPart) -> np.ndarray:
    """Max signed plane distance per point (<= 0 means inside); batched over frames."""
    signed = np.einsum('...pi,...ki->...pk', points, part.normals) + part.offsets[..., None, :]
    return signed.max(axis=-1)


def is_inside_convex(point, part: ConvexPart) -> Tuple[bool, float]:
    """
    Half-space membership. Points on the boundary count as inside with depth 0.

    Returns:
        (inside, depth) with depth = -max signed distance, reported as 0 outside
    """
    worst = float(signed_depths(np.asarray(point, dtype=np.float64).reshape(1, 3), part)[0])
    inside = worst <= 0.0
    return inside, (-worst if inside else 0.0)


def inside_mask(points: np.ndarray, parts: Sequence[ConvexPart]) -> Tuple[np.ndarray, np.ndarray]:
    """Inside flags and depths of points against the union of convex parts."""
    depth = np.full(points.shape[:-1], -np.inf)
    for part in parts:
        depth = np.maximum(depth, -signed_depths(points, part))
    inside = depth >= 0.0
    return inside, np.where(inside, depth, 0.0)


# ---------------------------------------------------------------------------
# Losses on one frame (numpy)
# ---------------------------------------------------------------------------

def penetration_loss(hand_vertices, posed: PosedObject) -> float:
    """Mean over penetrating hand vertices of the squared distance to the closest object sample."""
    hand_vertices = np.asarray(hand_vertices, dtype=np.float64).reshape(-1, 3)
    inside, _ = inside_mask(hand_vertices, posed.parts)
    if not inside.any():
        return 0.0
    dist, _ = nearest_vertices(hand_vertices[inside], posed.samples)
    return float(dist.mean())


def contact_grasp_loss(hand_joints, posed: PosedObject,
                       thresholds: ContactThresholds = ContactThresholds()) -> float:
    """Sum of D(J) over joints with D(J) <= phi**2."""
    dist, _ = nearest_vertices(np.asarray(hand_joints, dtype=np.float64).reshape(-1, 3), posed.samples)
    return float(np.sum(np.where(dist <= thresholds.phi_approach ** 2, dist, 0.0)))


def contact_region_loss(gt_hand_vertices, recon_hand_vertices, posed: PosedObject,
                        thresholds: ContactThresholds = ContactThresholds(),
                        recon_posed: Optional[PosedObject] = None) -> float:
    """
    Sum over ground-truth contact vertices (D < tau**2) of the indicator
    mismatch plus the reconstruction's squared distance.

    Args:
        recon_posed: object posed for the reconstruction; defaults to posed

    Raises:
        GeometryLengthMismatch: if the vertex arrays are not aligned
    """
    gt = np.asarray(gt_hand_vertices, dtype=np.float64).reshape(-1, 3)
    recon = np.asarray(recon_hand_vertices, dtype=np.float64).reshape(-1, 3)
    if gt.shape != recon.shape:
        raise GeometryLengthMismatch(f"Vertex arrays differ: {gt.shape} vs {recon.shape}")
    tau_sq = thresholds.tau_contact ** 2
    gt_dist, _ = nearest_vertices(gt, posed.samples)
    recon_dist, _ = nearest_vertices(recon, (recon_posed or posed).samples)
    contact = gt_dist < tau_sq
    mismatch = np.abs(contact.astype(np.float64) - (recon_dist < tau_sq).astype(np.float64))
    return float(np.sum((mismatch + recon_dist)[contact]))


def combine(weights: GeoWeights, l_pen: float, l_c: float, l_r: float) -> float:
    return weights.lambda_pen * l_pen + weights.beta_c * l_c + weights.gamma_r * l_r


# ---------------------------------------------------------------------------
# Sequence level
# ---------------------------------------------------------------------------

def _frames(array) -> np.ndarray:
    return np.asarray(array, dtype=np.float64).reshape(-1, FRAME_WIDTH)


def geo_loss(gt_frames, recon_frames, object_model: ObjectModel,
             weights: GeoWeights = GeoWeights(),
             thresholds: ContactThresholds = ContactThresholds()) -> GeoReport:
    """
    Per-sequence geometry report, every term averaged over frames.

    The penetration and grasp terms are measured on the reconstruction
    against the object posed from the reconstruction's own object channels.
    """
    gt, recon = _frames(gt_frames), _frames(recon_frames)
    if gt.shape != recon.shape:
        raise GeometryLengthMismatch(f"Sequences differ in length: {gt.shape} vs {recon.shape}")
    gt_posed = pose_object_batch(object_model, gt[:, :OBJECT_WIDTH])
    recon_posed = pose_object_batch(object_model, recon[:, :OBJECT_WIDTH], clamp=True)
    _, gt_verts = both_hands(gt)
    recon_joints, recon_verts = both_hands(recon)

    pens, grasps, regions = [], [], []
    count, depth = 0, 0.0
    for f in range(gt.shape[0]):
        frame_gt = _frame_of(gt_posed, f)
        frame_recon = _frame_of(recon_posed, f)
        pens.append(penetration_loss(recon_verts[f], frame_recon))
        grasps.append(contact_grasp_loss(recon_joints[f], frame_recon, thresholds))
        regions.append(contact_region_loss(gt_verts[f], recon_verts[f], frame_gt, thresholds, frame_recon))
        inside, depths = inside_mask(recon_verts[f], frame_recon.parts)
        count += int(inside.sum())
        depth = max(depth, float(depths.max()) if depths.size else 0.0)

    l_pen, l_c, l_r = float(np.mean(pens)), float(np.mean(grasps)), float(np.mean(regions))
    return GeoReport(l_pen=l_pen, l_c=l_c, l_r=l_r, l_geo=combine(weights, l_pen, l_c, l_r),
                     penetrating_vertex_count=count, max_depth=depth)


def _frame_of(batch: PosedObject, f: int) -> PosedObject:
    return PosedObject(vertices=batch.vertices[f], samples=batch.samples[f],
                       parts=[ConvexPart(p.normals[f], p.offsets[f]) for p in batch.parts])


def iv_metric(hand_vertices_seq, posed_seq: Sequence[PosedObject]) -> Tuple[int, float]:
    """
    Interpenetration over a sequence.

    Returns:
        (total penetrating hand vertices over all frames, max depth)
    """
    count, depth = 0, 0.0
    for verts, posed in zip(hand_vertices_seq, posed_seq):
        inside, depths = inside_mask(np.asarray(verts, dtype=np.float64).reshape(-1, 3), posed.parts)
        count += int(inside.sum())
        if depths.size:
            depth = max(depth, float(depths.max()))
    return count, depth


def sequence_iv(frames, object_model: ObjectModel, clamp: bool = True) -> Tuple[int, float]:
    """IV of a (T, 208) sequence against its own object channels."""
    frames = _frames(frames)
    posed = pose_object_batch(object_model, frames[:, :OBJECT_WIDTH], clamp=clamp)
    _, verts = both_hands(frames)
    return iv_metric(verts, [_frame_of(posed, f) for f in range(frames.shape[0])])


def hand_object_min_distance(frames, object_model: ObjectModel) -> np.ndarray:
    """Per-frame, per-hand minimum squared distance (T, 2) from hand surface to object samples."""
    frames = _frames(frames)
    posed = pose_object_batch(object_model, frames[:, :OBJECT_WIDTH])
    _, verts = both_hands(frames)
    half = verts.shape[1] // 2
    dist, _ = nearest_vertices(verts, posed.samples)
    return np.stack([dist[:, :half].min(axis=1), dist[:, half:].min(axis=1)], axis=1)


# ---------------------------------------------------------------------------
# Differentiable batch terms for training
# ---------------------------------------------------------------------------

@dataclass
class GeoTerms:
    l_pen: Tensor
    l_c: Tensor
    l_r: Tensor

    def weighted(self, weights: GeoWeights) -> Tensor:
        return T.add(T.add(T.mul(self.l_pen, weights.lambda_pen), T.mul(self.l_c, weights.beta_c)),
                     T.mul(self.l_r, weights.gamma_r))


def _nearest_sq(points: Tensor, samples: np.ndarray) -> Tensor:
    """D for each point with the nearest sample picked on detached values."""
    _, index = nearest_vertices(points.data, samples)
    nearest = np.take_along_axis(samples, index[..., None], axis=-2)
    return T.reduce_sum(T.square(T.sub(points, nearest)), axis=-1)


def geo_terms_tensor(gt_frames: np.ndarray, recon_frames: Tensor, object_ids: Sequence[str],
                     object_models: Dict[str, ObjectModel],
                     thresholds: ContactThresholds = ContactThresholds()) -> GeoTerms:
    """
    Frame-averaged penetration, grasp and region terms for (N, 208) frames,
    differentiable with respect to the reconstructed hand channels.
    """
    gt_frames = _frames(gt_frames)
    n = gt_frames.shape[0]
    object_ids = np.asarray(object_ids)
    totals = {'pen': [], 'c': [], 'r': []}
    phi_sq, tau_sq = thresholds.phi_approach ** 2, thresholds.tau_contact ** 2

    for name in sorted(set(object_ids.tolist())):
        rows = np.flatnonzero(object_ids == name)
        model = object_models[name]
        gt = gt_frames[rows]
        recon = recon_frames[rows]
        gt_posed = pose_object_batch(model, gt[:, :OBJECT_WIDTH])
        recon_posed = pose_object_batch(model, recon.data[:, :OBJECT_WIDTH], clamp=True)
        _, gt_verts = both_hands(gt)
        joints, verts = both_hands_tensor(recon)

        d_verts = _nearest_sq(verts, recon_posed.samples)
        inside, _ = inside_mask(verts.data, recon_posed.parts)
        per_frame_count = np.maximum(inside.sum(axis=1, keepdims=True), 1)
        totals['pen'].append(T.reduce_sum(T.mul(d_verts, inside / per_frame_count)))

        d_joints = _nearest_sq(joints, recon_posed.samples)
        totals['c'].append(T.reduce_sum(T.mul(d_joints, (d_joints.data <= phi_sq).astype(np.float64))))

        gt_dist, _ = nearest_vertices(gt_verts, gt_posed.samples)
        contact = (gt_dist < tau_sq).astype(np.float64)
        mismatch = np.abs(contact - (d_verts.data < tau_sq))
        totals['r'].append(T.reduce_sum(T.mul(T.add(d_verts, mismatch), contact)))

    def mean_over_frames(parts: List[Tensor]) -> Tensor:
        total = parts[0]
        for part in parts[1:]:
            total = T.add(total, part)
        return T.div(total, float(n))

    return GeoTerms(l_pen=mean_over_frames(totals['pen']), l_c=mean_over_frames(totals['c']),
                    l_r=mean_over_frames(totals['r']))
