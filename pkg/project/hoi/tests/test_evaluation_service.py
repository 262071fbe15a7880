"""
Unit tests for the evaluation service.
Tests the feature-space metrics on hand-computed cases, displacement
errors, the matcher and the full evaluate() pass with generation mocked.
"""

import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from hoi.domain import LEFT_SLICE, RIGHT_SLICE, HOISequence
from hoi.services.codec_service import TaskKind, build_vocabulary
from hoi.services.config_service import EvalConfig, TokenizerConfig
from hoi.services.dataset_service import constant_velocity_sequence
from hoi.services.evaluation_service import (
    EvalReport, EvaluationError, LengthMismatch, TooFewSamples, ade_fde, build_matcher, confidence_interval,
    diversity, evaluate, format_table, freeze_last_frame_baseline, frechet_distance, iv_summary,
    load_matcher, mm_dist, mmodality, r_precision, save_matcher, summarize, train_matcher, write_report_csv,
)
from hoi.services.kinematics_service import build_object_model
from hoi.services.language_model_service import TaskOutput
from hoi.services.tokenizer_service import build_artifacts

CAPTIONS = ['lift the cube with both hands', 'rotate the cube with the left hand',
            'grasp the cube with the right hand', 'approach the cube with both hands']


def tiny_eval_config(**overrides):
    values = dict(matcher_epochs=2, matcher_batch=4, matcher_hidden=8, embed_dim=8, mmodality_samples=2)
    values.update(overrides)
    return EvalConfig(**values)


def captioned_sequences():
    sequences = []
    for i, caption in enumerate(CAPTIONS):
        base = constant_velocity_sequence('cube', 12, [0.002 * (i + 1), 0.0, 0.0])
        sequences.append(HOISequence(features=base.features, object_id='cube', caption=caption))
    return sequences


class FeatureMetricTestCase(SimpleTestCase):
    """Test cases for FID, diversity, MModality, R-Precision and MMDist"""

    def test_frechet_one_dimensional(self):
        """Test unit-variance sets one apart have distance 1"""
        a = np.array([-1.0, 1.0]) / np.sqrt(2.0)
        self.assertAlmostEqual(frechet_distance(a, a + 1.0), 1.0, places=9)
        self.assertAlmostEqual(frechet_distance(a, a), 0.0, places=9)

    def test_frechet_with_ridge(self):
        """Test fewer samples than dimensions still gives a finite distance"""
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 6))
        self.assertAlmostEqual(frechet_distance(a, a), 0.0, places=6)
        self.assertGreater(frechet_distance(a, a + 2.0), 0.0)

    def test_frechet_errors(self):
        """Test width mismatch and single rows"""
        with self.assertRaises(EvaluationError):
            frechet_distance(np.zeros((3, 2)), np.zeros((3, 3)))
        with self.assertRaises(TooFewSamples):
            frechet_distance(np.zeros((1, 2)), np.zeros((3, 2)))

    def test_diversity(self):
        """Test sampled and exhaustive pair means"""
        features = np.array([[0.0, 0.0], [3.0, 4.0]])
        self.assertAlmostEqual(diversity(features, pairs=None), 5.0)
        self.assertAlmostEqual(diversity(features, pairs=10, seed=2), 5.0)
        self.assertAlmostEqual(diversity(np.array([[0.0], [1.0], [3.0]]), pairs=None), 2.0)
        with self.assertRaises(TooFewSamples):
            diversity(np.zeros((1, 2)))

    def test_mmodality(self):
        """Test the mean of per-prompt pairwise distances"""
        self.assertAlmostEqual(mmodality([[[0.0], [2.0]], [[0.0], [4.0]]]), 3.0)
        with self.assertRaises(TooFewSamples):
            mmodality([[[0.0]]])
        with self.assertRaises(TooFewSamples):
            mmodality([])

    def test_r_precision(self):
        """Test perfect, reversed and tied retrieval"""
        points = np.eye(8)
        self.assertEqual(r_precision(points, points, batch=4), {1: 1.0, 2: 1.0, 3: 1.0})
        motion = np.array([0.0, 10.0, 20.0, 30.0])
        self.assertEqual(r_precision(motion, motion[::-1], batch=4), {1: 0.0, 2: 0.5, 3: 0.5})
        self.assertEqual(r_precision(np.zeros((4, 2)), np.zeros((4, 2)), batch=4)[1], 1.0)
        with self.assertRaises(TooFewSamples):
            r_precision(points[:3], points[:3], batch=4)
        with self.assertRaises(EvaluationError):
            r_precision(points, points[:4], batch=4)

    def test_r_precision_sampled_batches(self):
        """Test independently drawn batches stay within [0, 1]"""
        rng = np.random.default_rng(1)
        motion, text = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
        rates = r_precision(motion, text, batch=4, batches=5, seed=3)
        self.assertEqual(rates, r_precision(motion, text, batch=4, batches=5, seed=3))
        self.assertTrue(0.0 <= rates[1] <= rates[2] <= rates[3] <= 1.0)

    def test_mm_dist(self):
        """Test the mean matched distance"""
        self.assertAlmostEqual(mm_dist([[0.0, 0.0], [1.0, 1.0]], [[3.0, 4.0], [1.0, 1.0]]), 2.5)


class MotionMetricTestCase(SimpleTestCase):
    """Test cases for ADE/FDE, the baseline, IV and intervals"""

    def setUp(self):
        """Set up test fixtures"""
        self.sequence = constant_velocity_sequence('cube', 6, [0.003, 0.0, 0.0])

    def test_wrist_offset_gives_constant_error(self):
        """Test shifting both wrists by 1 cm gives ADE = FDE = 0.01"""
        features = self.sequence.features.copy()
        features[:, LEFT_SLICE.start] += 0.01
        features[:, RIGHT_SLICE.start] += 0.01
        ade, fde = ade_fde(self.sequence.with_features(features), self.sequence)
        self.assertAlmostEqual(ade, 0.01, places=6)
        self.assertAlmostEqual(fde, 0.01, places=6)
        self.assertEqual(ade_fde(self.sequence, self.sequence), (0.0, 0.0))
        with self.assertRaises(LengthMismatch):
            ade_fde(features[:3], self.sequence)

    def test_freeze_last_frame(self):
        """Test frames after the observed prefix repeat its last frame"""
        baseline = freeze_last_frame_baseline(self.sequence, 2)
        np.testing.assert_array_equal(baseline.features[:2], self.sequence.features[:2])
        for t in range(2, 6):
            np.testing.assert_array_equal(baseline.features[t], self.sequence.features[1])
        with self.assertRaises(TooFewSamples):
            freeze_last_frame_baseline(self.sequence, 0)

    def test_iv_summary_for_resting_hands(self):
        """Test hands away from the object report no interpenetration"""
        models = {'cube': build_object_model('cube', sample_count=80, point_count=16)}
        summary = iv_summary([self.sequence], models)
        self.assertEqual(summary, {'iv_count': 0.0, 'iv_per_frame': 0.0, 'iv_max_depth': 0.0})

    def test_confidence_interval(self):
        """Test mean and 95% half-width"""
        mean, half = confidence_interval([1.0, 2.0, 3.0])
        self.assertAlmostEqual(mean, 2.0)
        self.assertAlmostEqual(half, 1.96 / np.sqrt(3.0))
        self.assertEqual(confidence_interval([4.0]), (4.0, 0.0))
        with self.assertRaises(TooFewSamples):
            confidence_interval([])


class ReportTestCase(SimpleTestCase):
    """Test cases for report checks and output"""

    def test_check_rejects_invalid_values(self):
        """Test non-finite metrics and out-of-range rates"""
        with self.assertRaises(EvaluationError):
            EvalReport(fid=float('nan')).check()
        with self.assertRaises(EvaluationError):
            EvalReport(r_precision_top2=1.5).check()
        self.assertEqual(EvalReport(fid=1.0).check().fid, 1.0)

    def test_summary_outputs(self):
        """Test the CSV has one row per metric and the table lists every metric"""
        reports = [EvalReport(fid=1.0, ade=0.2), EvalReport(fid=3.0, ade=0.4)]
        self.assertEqual(summarize(reports)['fid'][0], 2.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'metrics.csv'
            write_report_csv(path, reports)
            lines = path.read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'metric,run_0,run_1,mean,ci95')
        self.assertEqual(len(lines), 1 + len(EvalReport.metric_names()))
        table = format_table(reports)
        for name in EvalReport.metric_names():
            self.assertIn(name, table)


class MatcherTestCase(SimpleTestCase):
    """Test cases for the motion/text matcher"""

    def setUp(self):
        """Set up test fixtures"""
        self.sequences = captioned_sequences()
        self.vocab = build_vocabulary(CAPTIONS, 8, 8)

    def test_training_curve_and_margin(self):
        """Test a short training run reports a finite curve and margins"""
        result = train_matcher(self.sequences, self.vocab, tiny_eval_config(), seed=1, min_pairs=4)
        self.assertEqual([row['epoch'] for row in result.loss_curve], [1, 2])
        self.assertTrue(np.isfinite(result.loss_curve[-1]['loss']))
        self.assertGreaterEqual(result.matched_distance, 0.0)
        features = result.artifacts.motion_features(self.sequences)
        self.assertEqual(features.shape, (4, 8))

    def test_too_few_pairs(self):
        """Test the default minimum pair count"""
        with self.assertRaises(TooFewSamples):
            train_matcher(self.sequences, self.vocab, tiny_eval_config())

    def test_save_and_load(self):
        """Test a saved matcher embeds identically after loading"""
        artifacts = build_matcher(self.vocab, tiny_eval_config(), seed=3)
        with tempfile.TemporaryDirectory() as tmp:
            save_matcher(Path(tmp) / 'matcher', artifacts)
            loaded = load_matcher(Path(tmp) / 'matcher')
        np.testing.assert_allclose(loaded.text_features(CAPTIONS), artifacts.text_features(CAPTIONS), atol=1e-6)
        np.testing.assert_allclose(loaded.motion_features(self.sequences), artifacts.motion_features(self.sequences),
                                   atol=1e-6)


class EvaluateTestCase(SimpleTestCase):
    """Test cases for the full metric pass"""

    def setUp(self):
        """Set up test fixtures"""
        self.heldout = captioned_sequences()
        self.by_caption = {s.caption: s for s in self.heldout}
        self.tokenizer = build_artifacts(TokenizerConfig(codebook_size=8, latent_dim=8, hidden=16, window=4,
                                                         handedness_dim=4), seed=0)
        self.matcher = build_matcher(build_vocabulary(CAPTIONS, 8, 8), tiny_eval_config(), seed=0)
        self.models = {'cube': build_object_model('cube', sample_count=80, point_count=16)}

    def perfect_generation(self, kind, request, *args, **kwargs):
        """Stand-in generator that returns the ground truth."""
        if kind == TaskKind.TEXT_TO_HOI:
            return TaskOutput(kind, sequence=self.by_caption[request.caption])
        return TaskOutput(kind, sequence=request.sequence)

    @mock.patch('hoi.services.evaluation_service.run_task')
    def test_perfect_generations(self, mock_run_task):
        """Test ground-truth generations score zero FID and ADE, beating the baseline"""
        mock_run_task.side_effect = self.perfect_generation
        report = evaluate(self.heldout, None, self.tokenizer, self.matcher, self.models, {}, tiny_eval_config())
        self.assertAlmostEqual(report.fid, 0.0, places=6)
        self.assertEqual(report.ade, 0.0)
        self.assertGreater(report.ade_baseline, 0.0)
        self.assertEqual(report.mmodality, 0.0)
        self.assertEqual(report.malformed, 0.0)
        self.assertEqual(report.iv_count, 0.0)
        kinds = [call.args[0] for call in mock_run_task.call_args_list]
        self.assertEqual(kinds.count(TaskKind.PREDICTION), 4)
        self.assertEqual(kinds.count(TaskKind.TEXT_TO_HOI), 4 + 2 * 2)

    @mock.patch('hoi.services.evaluation_service.run_task')
    def test_too_few_heldout(self, mock_run_task):
        """Test evaluation needs two held-out sequences"""
        with self.assertRaises(TooFewSamples):
            evaluate(self.heldout[:1], None, self.tokenizer, self.matcher, self.models, {}, tiny_eval_config())
        mock_run_task.assert_not_called()
