"""
Unit tests for the geometry service.
Tests distance queries, convex containment, the three contact losses and IV.
"""

import csv
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from hoi.domain import FRAME_WIDTH, IDENTITY_6D, LEFT_SLICE, RIGHT_SLICE
from hoi.services.geometry_service import (
    ContactThresholds, EmptyVertexSet, GeoReport, GeoWeights, GeometryError, GeometryLengthMismatch,
    combine, contact_grasp_loss, contact_region_loss, geo_loss, inside_mask, is_inside_convex, iv_metric,
    min_sq_dist_to_vertices, nearest_vertices, penetration_loss, sequence_iv, write_geo_report,
)
from hoi.services.kinematics_service import build_object_model, pose_object


def resting_frame(left=(0.0, -0.35, 0.12), right=(0.0, 0.35, 0.12)):
    """Object at the origin, both hands open with identity rotations."""
    frame = np.zeros(FRAME_WIDTH)
    frame[3:9] = IDENTITY_6D
    for span, tau in ((LEFT_SLICE, left), (RIGHT_SLICE, right)):
        hand = np.concatenate([tau, IDENTITY_6D, np.tile(IDENTITY_6D, 15)])
        frame[span] = hand
    return frame


class DistanceQueryTestCase(SimpleTestCase):
    """Test cases for nearest-vertex queries"""

    def setUp(self):
        """Set up test fixtures"""
        self.rng = np.random.default_rng(11)

    def test_matches_brute_force(self):
        """Test vectorized nearest vertices against a per-pair loop"""
        points = self.rng.standard_normal((7, 3))
        verts = self.rng.standard_normal((13, 3))
        dist, index = nearest_vertices(points, verts)
        for p, point in enumerate(points):
            expected = [float(np.dot(point - v, point - v)) for v in verts]
            with self.subTest(point=p):
                self.assertEqual(int(index[p]), int(np.argmin(expected)))
                self.assertAlmostEqual(float(dist[p]), min(expected), places=12)

    def test_batched_frames(self):
        """Test (F, P, 3) queries against per-frame vertex sets"""
        points = self.rng.standard_normal((2, 4, 3))
        verts = self.rng.standard_normal((2, 5, 3))
        dist, _ = nearest_vertices(points, verts)
        self.assertEqual(dist.shape, (2, 4))
        np.testing.assert_allclose(dist[1], nearest_vertices(points[1], verts[1])[0])

    def test_ties_pick_lowest_index(self):
        """Test equidistant vertices resolve to the first"""
        dist, index = min_sq_dist_to_vertices([0.0, 0.0, 0.0], [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        self.assertEqual(index, 0)
        self.assertEqual(dist, 1.0)

    def test_empty_vertex_set(self):
        """Test EmptyVertexSet for no vertices"""
        with self.assertRaises(EmptyVertexSet):
            min_sq_dist_to_vertices([0.0, 0.0, 0.0], np.zeros((0, 3)))


class ContainmentTestCase(SimpleTestCase):
    """Test cases for convex part membership"""

    def setUp(self):
        """Set up test fixtures"""
        self.cube = build_object_model('cube', sample_count=120, point_count=16)
        self.posed = pose_object(self.cube, np.concatenate([np.zeros(3), IDENTITY_6D, [0.0]]))

    def test_center_is_inside(self):
        """Test the cube center is inside at the half-width depth"""
        inside, depth = is_inside_convex([0.0, 0.0, 0.0], self.posed.parts[0])
        self.assertTrue(inside)
        self.assertAlmostEqual(depth, 0.04, places=9)

    def test_outside_point(self):
        """Test points beyond a face report zero depth"""
        inside, depth = is_inside_convex([0.1, 0.0, 0.0], self.posed.parts[0])
        self.assertFalse(inside)
        self.assertEqual(depth, 0.0)

    def test_inside_mask_depths(self):
        """Test the union mask over several points"""
        points = np.array([[0.0, 0.0, 0.0], [0.03, 0.0, 0.0], [0.2, 0.0, 0.0]])
        inside, depths = inside_mask(points, self.posed.parts)
        self.assertEqual(inside.tolist(), [True, True, False])
        np.testing.assert_allclose(depths, [0.04, 0.01, 0.0], atol=1e-9)


class ContactLossTestCase(SimpleTestCase):
    """Test cases for penetration, grasp and region losses"""

    def setUp(self):
        """Set up test fixtures"""
        self.cube = build_object_model('cube', sample_count=120, point_count=16)
        self.posed = pose_object(self.cube, np.concatenate([np.zeros(3), IDENTITY_6D, [0.0]]))
        self.thresholds = ContactThresholds(phi_approach=0.02, tau_contact=0.005)

    def test_penetration_zero_when_outside(self):
        """Test no penetrating vertex gives zero loss"""
        self.assertEqual(penetration_loss(np.array([[0.5, 0.5, 0.5]]), self.posed), 0.0)

    def test_penetration_averages_inside_vertices(self):
        """Test the loss is the mean squared distance of penetrating vertices to the surface"""
        verts = np.array([[0.0, 0.0, 0.0], [0.03, 0.0, 0.0], [1.0, 0.0, 0.0]])
        expected = np.mean([np.min(np.sum((self.posed.samples - v) ** 2, axis=1)) for v in verts[:2]])
        self.assertAlmostEqual(penetration_loss(verts, self.posed), float(expected), places=12)

    def test_grasp_counts_joints_within_phi(self):
        """Test only joints within phi of the surface contribute"""
        sample = self.posed.samples[0]
        near = sample + np.array([0.01, 0.0, 0.0]) * np.sign(sample[0] or 1.0)
        joints = np.stack([near, np.array([1.0, 1.0, 1.0])])
        expected, _ = min_sq_dist_to_vertices(near, self.posed.samples)
        self.assertLessEqual(expected, 0.02 ** 2)
        self.assertAlmostEqual(contact_grasp_loss(joints, self.posed, self.thresholds), expected, places=12)
        self.assertEqual(contact_grasp_loss(joints[1:], self.posed, self.thresholds), 0.0)

    def test_region_loss(self):
        """Test contact-region loss for matched and lost contacts"""
        gt = self.posed.samples[:3].copy()
        with self.subTest(case='matched'):
            self.assertEqual(contact_region_loss(gt, gt, self.posed, self.thresholds), 0.0)
        with self.subTest(case='lost'):
            recon = gt + np.array([1.0, 0.0, 0.0])
            recon_dist = [min_sq_dist_to_vertices(v, self.posed.samples)[0] for v in recon]
            expected = 3.0 + sum(recon_dist)
            self.assertAlmostEqual(contact_region_loss(gt, recon, self.posed, self.thresholds), expected, places=9)
        with self.subTest(case='misaligned'):
            with self.assertRaises(GeometryLengthMismatch):
                contact_region_loss(gt, gt[:2], self.posed, self.thresholds)

    def test_combine_weights(self):
        """Test the weighted geometric sum"""
        weights = GeoWeights(lambda_pen=0.2, beta_c=0.5, gamma_r=1.0)
        self.assertAlmostEqual(combine(weights, 1.0, 2.0, 3.0), 0.2 + 1.0 + 3.0)
        self.assertEqual(combine(GeoWeights(0.0, 0.0, 0.0), 1.0, 2.0, 3.0), 0.0)

    def test_invalid_thresholds(self):
        """Test threshold validation"""
        invalid = [(0.0, 0.001), (0.01, 0.02), (0.02, -0.001)]
        for phi, tau in invalid:
            with self.subTest(phi=phi, tau=tau):
                with self.assertRaises(GeometryError):
                    ContactThresholds(phi_approach=phi, tau_contact=tau)
        with self.assertRaises(GeometryError):
            GeoWeights(lambda_pen=-1.0)


class SequenceGeometryTestCase(SimpleTestCase):
    """Test cases for sequence-level IV and geo_loss"""

    def setUp(self):
        """Set up test fixtures"""
        self.cube = build_object_model('cube', sample_count=120, point_count=16)

    def test_resting_hands_have_no_interpenetration(self):
        """Test far-away hands give zero IV"""
        frames = np.stack([resting_frame(), resting_frame()])
        self.assertEqual(sequence_iv(frames, self.cube), (0, 0.0))

    def test_wrist_inside_object_counts(self):
        """Test a hand placed in the cube penetrates"""
        frames = np.stack([resting_frame(), resting_frame(right=(0.0, 0.0, 0.0))])
        count, depth = sequence_iv(frames, self.cube)
        self.assertGreater(count, 0)
        self.assertGreater(depth, 0.0)
        self.assertLessEqual(depth, 0.04 + 1e-9)

    def test_identical_reconstruction_has_zero_region_loss(self):
        """Test geo_loss of a sequence against itself"""
        frames = np.stack([resting_frame(), resting_frame()])
        report = geo_loss(frames, frames, self.cube)
        self.assertEqual(report.l_r, 0.0)
        self.assertEqual(report.l_pen, 0.0)
        self.assertEqual(report.penetrating_vertex_count, 0)

    def test_iv_metric_counts_inside_vertices(self):
        """Test per-frame vertex counts add up and depth is the deepest vertex"""
        posed = pose_object(self.cube, np.concatenate([np.zeros(3), IDENTITY_6D, [0.0]]))
        frames = [np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]), np.array([[0.0, 0.0, 0.01], [0.0, 0.0, 0.0]])]
        count, depth = iv_metric(frames, [posed, posed])
        self.assertEqual(count, 3)
        self.assertGreater(depth, 0.0)
        self.assertEqual(iv_metric([np.array([[1.0, 1.0, 1.0]])], [posed]), (0, 0.0))

    def test_length_mismatch(self):
        """Test geo_loss rejects sequences of different length"""
        with self.assertRaises(GeometryLengthMismatch):
            geo_loss(np.stack([resting_frame()] * 2), np.stack([resting_frame()] * 3), self.cube)


class GeoReportFileTestCase(SimpleTestCase):
    """Test cases for the per-sequence geometry CSV"""

    def test_rows_follow_input_order(self):
        """Test header, row order and value formatting"""
        reports = [('train/00000', GeoReport(l_pen=0.5, l_c=0.25, l_r=0.125, l_geo=0.875,
                                             penetrating_vertex_count=3, max_depth=0.01)),
                   ('heldout/00000', GeoReport())]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'geo.csv'
            write_geo_report(path, reports)
            with open(path, newline='', encoding='utf-8') as fh:
                rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ['seq_id', 'l_pen', 'l_c', 'l_r', 'l_geo', 'iv_count', 'iv_max_depth'])
        self.assertEqual(rows[1], ['train/00000', '0.5', '0.25', '0.125', '0.875', '3', '0.01'])
        self.assertEqual(rows[2], ['heldout/00000', '0.0', '0.0', '0.0', '0.0', '0', '0.0'])
