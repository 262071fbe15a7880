"""
Unit tests for the tokenizer service and its networks.
Uses tiny configurations so training runs in seconds.
"""

import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from hoi.domain import FRAME_WIDTH, TokenTriple
from hoi.nn.tensor import ShapeMismatch
from hoi.nn.tokenizer_networks import EmptyCloud, TokenizerNetwork, WindowLengthMismatch
from hoi.services.config_service import GeometryConfig, TokenizerConfig
from hoi.services.dataset_service import constant_velocity_sequence
from hoi.services.kinematics_service import build_object_model
from hoi.services.tokenizer_service import (
    LOSS_COLUMNS, EmptyDataset, EmptyTokenStream, TokenOutOfRange, build_artifacts, decode_sequence,
    encode_sequence, forward_windows, load_tokenizer, loss_total, pad_to_windows, point_features_for,
    reconstruct, reconstruction_error, save_tokenizer, split_windows, train_tokenizer,
)
from hoi.services.quantizer_service import update_codebooks


def tiny_config(**overrides):
    values = dict(epochs=2, batch_size=4, codebook_size=8, latent_dim=8, hidden=16, window=4,
                  handedness_dim=4, log_every=1)
    values.update(overrides)
    return TokenizerConfig(**values)


class WindowTestCase(SimpleTestCase):
    """Test cases for window padding and splitting"""

    def test_pad_repeats_last_frame(self):
        """Test ragged sequences are padded with their final frame"""
        features = np.arange(6 * FRAME_WIDTH, dtype=np.float32).reshape(6, FRAME_WIDTH)
        padded, added = pad_to_windows(features, 4)
        self.assertEqual(padded.shape, (8, FRAME_WIDTH))
        self.assertEqual(added, 2)
        np.testing.assert_array_equal(padded[7], features[5])

    def test_lengths(self):
        """Test padded lengths for short, exact and ragged inputs"""
        cases = {1: 4, 4: 4, 5: 8, 9: 12}
        for length, expected in cases.items():
            with self.subTest(length=length):
                windows = split_windows(np.zeros((length, FRAME_WIDTH)), 4)
                self.assertEqual(windows.shape, (expected // 4, 4, FRAME_WIDTH))

    def test_empty_sequence(self):
        """Test an empty sequence cannot be windowed"""
        with self.assertRaises(ShapeMismatch):
            pad_to_windows(np.zeros((0, FRAME_WIDTH)), 4)


class TokenizerNetworkTestCase(SimpleTestCase):
    """Test cases for encoder and decoder shapes"""

    def setUp(self):
        """Set up test fixtures"""
        self.network = TokenizerNetwork(latent_dim=8, hidden=16, window=4, handedness_dim=4, seed=0)

    def test_encode_decode_shapes(self):
        """Test window encode and decode shapes"""
        windows = np.zeros((3, 4, FRAME_WIDTH), dtype=np.float32)
        z_o, z_l, z_r = self.network.encode_window(windows)
        self.assertEqual(z_o.shape, (3, 8))
        c_o = self.network.point_features(np.zeros((5, 3)))
        recon = self.network.decode(z_o, z_l, z_r, c_o)
        self.assertEqual(recon.shape, (3, 4, FRAME_WIDTH))

    def test_handedness_changes_hand_latent(self):
        """Test the same hand window encodes differently per hand"""
        frames = np.ones((1, 4, 99), dtype=np.float32)
        left = self.network.encode_hand(frames, 0).data
        right = self.network.encode_hand(frames, 1).data
        self.assertFalse(np.allclose(left, right))

    def test_window_validation(self):
        """Test wrong window length and empty clouds"""
        with self.assertRaises(WindowLengthMismatch):
            self.network.encode_window(np.zeros((1, 3, FRAME_WIDTH)))
        with self.assertRaises(EmptyCloud):
            self.network.point_features(np.zeros((0, 3)))

    def test_point_features_ignore_point_order(self):
        """Test permuted and repeated points encode to the same c_o"""
        cloud = np.random.default_rng(2).uniform(-0.05, 0.05, size=(7, 3))
        shuffled = cloud[[3, 0, 6, 1, 5, 2, 4]]
        np.testing.assert_allclose(self.network.point_features(shuffled).data,
                                   self.network.point_features(cloud).data, rtol=1e-6, atol=1e-7)
        repeated = np.tile(cloud[:1], (5, 1))
        np.testing.assert_allclose(self.network.point_features(repeated).data,
                                   self.network.point_features(cloud[:1]).data, rtol=1e-6, atol=1e-7)


class TokenizerCodingTestCase(SimpleTestCase):
    """Test cases for encode/decode with untrained artifacts"""

    def setUp(self):
        """Set up test fixtures"""
        self.artifacts = build_artifacts(tiny_config(), seed=0)
        self.cube = build_object_model('cube', sample_count=80, point_count=16)
        self.sequence = constant_velocity_sequence('cube', 10, [0.001, 0.0, 0.0])

    def test_encode_gives_one_triple_per_window(self):
        """Test ceil(T / W) triples within codebook range"""
        triples = encode_sequence(self.sequence, self.artifacts)
        self.assertEqual(len(triples), 3)
        for t in triples:
            self.assertTrue(0 <= t.left < 8 and 0 <= t.right < 8 and 0 <= t.obj < 8)

    def test_decode_truncates_to_source_length(self):
        """Test reconstruct returns the source frame count and caption"""
        recon = reconstruct(self.sequence, self.cube, self.artifacts)
        self.assertEqual(recon.features.shape, (10, FRAME_WIDTH))
        self.assertEqual(recon.caption, self.sequence.caption)
        self.assertGreaterEqual(reconstruction_error(self.sequence, recon), 0.0)

    def test_decode_errors(self):
        """Test empty and out-of-range token lists"""
        with self.assertRaises(EmptyTokenStream):
            decode_sequence([], self.cube, self.artifacts)
        cases = [TokenTriple(8, 0, 0), TokenTriple(0, -1, 0), TokenTriple(0, 0, 8)]
        for triple in cases:
            with self.subTest(triple=triple):
                with self.assertRaises(TokenOutOfRange):
                    decode_sequence([triple], self.cube, self.artifacts)

    def test_mask_applies_before_quantization(self):
        """Test a masked left-hand latent is zeroed for the quantizer and the EMA step"""
        windows = split_windows(self.sequence.features, 4)
        c_o = point_features_for(self.artifacts.network, ['cube'] * len(windows), {'cube': self.cube})
        mask = np.zeros((len(windows), 3), dtype=bool)
        mask[:, 1] = True
        _, _, plain = forward_windows(self.artifacts, windows, c_o)
        _, latents, masked = forward_windows(self.artifacts, windows, c_o, mask)
        np.testing.assert_array_equal(latents[1].data, 0.0)
        self.assertFalse(np.allclose(masked.stage_inputs['l'], plain.stage_inputs['l']))

        def hand_sums(result):
            hand, _ = update_codebooks(self.artifacts.hand_codebook, self.artifacts.object_codebook,
                                       np.atleast_2d(result.indices), result.stage_inputs, 0.9,
                                       np.random.default_rng(0))
            return hand.ema_sums
        self.assertFalse(np.allclose(hand_sums(masked), hand_sums(plain)))

    def test_independent_mode_quantizes_masked_latent_as_zero(self):
        """Test the independent quantizer receives the zeroed latent"""
        artifacts = build_artifacts(tiny_config(quantizer_mode='independent'), seed=0)
        windows = split_windows(self.sequence.features, 4)
        c_o = point_features_for(artifacts.network, ['cube'] * len(windows), {'cube': self.cube})
        mask = np.zeros((len(windows), 3), dtype=bool)
        mask[:, 1] = True
        _, _, result = forward_windows(artifacts, windows, c_o, mask)
        np.testing.assert_array_equal(result.stage_inputs['l'], 0.0)
        self.assertNotEqual(float(np.abs(result.stage_inputs['r']).sum()), 0.0)

    def test_loss_breakdown_sums_to_total(self):
        """Test l1 + l_embed + l_geo == total"""
        windows = split_windows(self.sequence.features, 4)
        c_o = point_features_for(self.artifacts.network, ['cube'] * len(windows), {'cube': self.cube})
        recon, latents, result = forward_windows(self.artifacts, windows, c_o)
        total, breakdown = loss_total(windows, recon, latents, result, self.artifacts.config)
        self.assertAlmostEqual(breakdown['l1'] + breakdown['l_embed'] + breakdown['l_geo'], breakdown['total'],
                               places=5)
        self.assertAlmostEqual(float(total.data), breakdown['total'], places=6)
        with self.assertRaises(ShapeMismatch):
            loss_total(windows[:1], recon, latents, result, self.artifacts.config)

    def test_reconstruction_error_shape_check(self):
        """Test reconstruction_error rejects different lengths"""
        other = self.sequence.with_features(self.sequence.features[:5])
        with self.assertRaises(ShapeMismatch):
            reconstruction_error(self.sequence, other)


class TokenizerTrainingTestCase(SimpleTestCase):
    """Test cases for tokenizer training and checkpoints"""

    def setUp(self):
        """Set up test fixtures"""
        self.models = {'cube': build_object_model('cube', sample_count=80, point_count=16)}
        self.dataset = [
            constant_velocity_sequence('cube', 8, [0.002, 0.0, 0.0]),
            constant_velocity_sequence('cube', 12, [0.0, 0.002, 0.001]),
        ]
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        """Clean up after tests"""
        self.tmp.cleanup()

    def test_training_writes_curve(self):
        """Test the loss curve has one finite row per epoch"""
        csv_path = self.dir / 'loss.csv'
        result = train_tokenizer(self.dataset, tiny_config(), self.models, seed=3, loss_csv=csv_path)
        self.assertEqual(len(result.loss_curve), 2)
        for row in result.loss_curve:
            self.assertTrue(all(np.isfinite(row[key]) for key in LOSS_COLUMNS))
        lines = csv_path.read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], ','.join(LOSS_COLUMNS))
        self.assertEqual(len(lines), 3)

    def test_training_is_deterministic(self):
        """Test identical seeds give identical curves and codebooks"""
        first = train_tokenizer(self.dataset, tiny_config(), self.models, seed=4)
        second = train_tokenizer(self.dataset, tiny_config(), self.models, seed=4)
        self.assertEqual(first.loss_curve, second.loss_curve)
        np.testing.assert_array_equal(first.artifacts.hand_codebook.entries,
                                      second.artifacts.hand_codebook.entries)

    def test_worker_count_does_not_change_result(self):
        """Test sharded gradients match the single-worker run"""
        single = train_tokenizer(self.dataset, tiny_config(), self.models, seed=5, workers=1)
        sharded = train_tokenizer(self.dataset, tiny_config(), self.models, seed=5, workers=2)
        for a, b in zip(single.loss_curve, sharded.loss_curve):
            self.assertAlmostEqual(a['total'], b['total'], places=4)

    def test_geometry_terms_reported(self):
        """Test geometry terms appear when enabled"""
        result = train_tokenizer(self.dataset, tiny_config(epochs=1), self.models,
                                 geometry=GeometryConfig(), seed=1)
        row = result.loss_curve[0]
        self.assertGreaterEqual(row['l_pen'], 0.0)
        self.assertGreaterEqual(row['l_r'], 0.0)
        self.assertTrue(np.isfinite(row['total']))

    def test_empty_dataset(self):
        """Test EmptyDataset when there is nothing to train on"""
        with self.assertRaises(EmptyDataset):
            train_tokenizer([], tiny_config(), self.models)

    def test_checkpoint_round_trip(self):
        """Test a saved tokenizer encodes identically after loading"""
        artifacts = train_tokenizer(self.dataset, tiny_config(epochs=1), self.models, seed=2).artifacts
        save_tokenizer(self.dir / 'tok', artifacts)
        loaded = load_tokenizer(self.dir / 'tok')
        for seq in self.dataset:
            with self.subTest(frames=seq.num_frames):
                self.assertEqual(encode_sequence(seq, loaded), encode_sequence(seq, artifacts))
        np.testing.assert_array_equal(loaded.object_codebook.ema_counts, artifacts.object_codebook.ema_counts)
