"""
Unit tests for the quantizer service.
Tests nearest-code lookup, decomposed and independent quantization, EMA
learning with dead-code reset, latent masking and codebook usage.
"""

from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from hoi.domain import TokenTriple
from hoi.nn import tensor as T
from hoi.nn.tensor import Tape, Tensor
from hoi.services.quantizer_service import (
    Codebook, CodebookKind, QuantizerError, codebook_usage, ema_update, embedding_loss,
    embedding_loss_tensor, hoi_decomposed_quantize, latent_mask, lookup, mask_latents,
    nearest_code, nearest_codes, quantize, update_codebooks,
)


class CodebookTestCase(SimpleTestCase):
    """Test cases for codebook construction and lookup"""

    def setUp(self):
        """Set up test fixtures"""
        self.rng = np.random.default_rng(5)
        self.book = Codebook.initialise(CodebookKind.HAND, 16, 4, self.rng)

    def test_validation(self):
        """Test codebooks need two finite entries"""
        with self.subTest(case='single entry'):
            with self.assertRaises(QuantizerError):
                Codebook(CodebookKind.HAND, np.zeros((1, 4)))
        with self.subTest(case='nan'):
            with self.assertRaises(QuantizerError):
                Codebook(CodebookKind.OBJECT, np.array([[0.0, np.nan], [1.0, 1.0]]))

    def test_nearest_matches_brute_force(self):
        """Test nearest_codes against an exhaustive scan"""
        vectors = self.rng.standard_normal((9, 4))
        chosen = nearest_codes(self.book.entries, vectors)
        for i, v in enumerate(vectors):
            distances = [float(np.sum((v - e.astype(np.float64)) ** 2)) for e in self.book.entries]
            with self.subTest(vector=i):
                self.assertEqual(int(chosen[i]), int(np.argmin(distances)))

    @mock.patch('hoi.services.quantizer_service.NEAREST_CHUNK_ELEMENTS', 200)
    def test_chunked_scan_matches_brute_force(self):
        """Test a scan split into many row chunks picks the same entries"""
        vectors = self.rng.standard_normal((37, 4))
        expected = [int(np.argmin(np.sum((v - self.book.entries.astype(np.float64)) ** 2, axis=1))) for v in vectors]
        self.assertEqual(nearest_codes(self.book.entries, vectors).tolist(), expected)
        self.assertEqual(nearest_codes(self.book.entries, np.zeros((0, 4))).tolist(), [])

    def test_tie_picks_lowest_index(self):
        """Test equidistant entries resolve to the first"""
        book = Codebook(CodebookKind.HAND, np.array([[1.0, 0.0], [-1.0, 0.0]]))
        index, entry = nearest_code(book, [0.0, 0.0])
        self.assertEqual(index, 0)
        np.testing.assert_array_equal(entry, [1.0, 0.0])

    def test_lookup_slots(self):
        """Test lookup returns object, left and right entries"""
        hand = Codebook(CodebookKind.HAND, np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        obj = Codebook(CodebookKind.OBJECT, np.array([[5.0, 5.0], [2.0, 0.0]]))
        z_o, z_l, z_r = lookup([TokenTriple(1, 2, 0)], hand, obj)
        np.testing.assert_array_equal(z_o, [[5.0, 5.0]])
        np.testing.assert_array_equal(z_l, [[1.0, 0.0]])
        np.testing.assert_array_equal(z_r, [[0.0, 1.0]])

    def test_usage_and_perplexity(self):
        """Test histogram and perplexity of token usage"""
        histogram, perplexity = codebook_usage(self.book, [0, 0, 1, 1])
        self.assertEqual(histogram[:3].tolist(), [2, 2, 0])
        self.assertAlmostEqual(perplexity, 2.0)
        _, empty = codebook_usage(self.book, [])
        self.assertEqual(empty, 0.0)


class DecomposedQuantizeTestCase(SimpleTestCase):
    """Test cases for residual quantization"""

    def setUp(self):
        """Set up test fixtures"""
        self.hand = Codebook(CodebookKind.HAND, np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        self.obj = Codebook(CodebookKind.OBJECT, np.array([[0.0, 0.0], [2.0, 0.0]]))

    def test_worked_example(self):
        """Test stage-by-stage choices on a hand-computed case"""
        result = hoi_decomposed_quantize([2.0, 0.0], [1.0, 0.0], [0.0, 1.0], self.hand, self.obj)
        self.assertEqual(result.indices.tolist(), [1, 2, 1])
        np.testing.assert_array_equal(result.z_hat, [3.0, 1.0])
        np.testing.assert_allclose(result.residual_norms, [np.sqrt(2.0), 1.0, 0.0])
        self.assertEqual(result.tokens, [TokenTriple(1, 2, 1)])

    def test_sum_plus_residual_is_input(self):
        """Test z_hat + final residual reconstructs z for random latents"""
        rng = np.random.default_rng(2)
        hand = Codebook.initialise(CodebookKind.HAND, 8, 3, rng, scale=1.0)
        obj = Codebook.initialise(CodebookKind.OBJECT, 8, 3, rng, scale=1.0)
        z = [rng.standard_normal((6, 3)) for _ in range(3)]
        result = hoi_decomposed_quantize(*z, hand, obj)
        total = z[0] + z[1] + z[2]
        np.testing.assert_allclose(np.linalg.norm(total - result.z_hat, axis=1), result.residual_norms[:, -1])
        np.testing.assert_allclose(result.z_hat, result.z_hat_o + result.z_hat_l + result.z_hat_r)

    def test_stage_order_changes_inputs(self):
        """Test a custom stage order quantizes hands first"""
        result = hoi_decomposed_quantize([2.0, 0.0], [1.0, 0.0], [0.0, 1.0], self.hand, self.obj,
                                         order=('l', 'r', 'o'))
        np.testing.assert_array_equal(result.stage_inputs['l'][0], [3.0, 1.0])
        np.testing.assert_array_equal(result.z_hat, [2.0, 0.0])

    def test_invalid_arguments(self):
        """Test order, width and mode validation"""
        with self.subTest(case='order'):
            with self.assertRaises(QuantizerError):
                hoi_decomposed_quantize([0, 0], [0, 0], [0, 0], self.hand, self.obj, order=('o', 'l', 'l'))
        with self.subTest(case='width'):
            with self.assertRaises(QuantizerError):
                hoi_decomposed_quantize([0, 0, 0], [0, 0, 0], [0, 0, 0], self.hand, self.obj)
        with self.subTest(case='mode'):
            with self.assertRaises(QuantizerError):
                quantize([0, 0], [0, 0], [0, 0], self.hand, self.obj, mode='product')

    def test_independent_mode(self):
        """Test the baseline quantizes each latent on its own"""
        result = quantize([1.9, 0.1], [0.9, 0.0], [0.1, 0.8], self.hand, self.obj, mode='independent')
        self.assertEqual(result.indices.tolist(), [1, 2, 1])
        np.testing.assert_array_equal(result.z_hat, [3.0, 1.0])

    def test_embedding_loss(self):
        """Test the commitment loss value and its gradient"""
        z = [np.array([[2.5, 0.0]]), np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]
        result = hoi_decomposed_quantize(*z, self.hand, self.obj)
        expected = 0.5 * sum(float(np.sum((a - b) ** 2)) for a, b in
                             zip(z, (result.z_hat_o, result.z_hat_l, result.z_hat_r)))
        self.assertAlmostEqual(embedding_loss(*z, result, alpha=0.5), expected)

        latents = [Tensor(a, requires_grad=True) for a in z]
        with Tape() as tape:
            loss = embedding_loss_tensor(latents, result, alpha=0.5)
        grads = tape.backward(loss)
        self.assertAlmostEqual(float(loss.data), expected)
        np.testing.assert_allclose(grads[latents[0].node_id], (z[0] - result.z_hat_o) * 1.0)

        with self.assertRaises(QuantizerError):
            embedding_loss(*z, result, alpha=-1.0)


class EMAUpdateTestCase(SimpleTestCase):
    """Test cases for EMA codebook learning"""

    def setUp(self):
        """Set up test fixtures"""
        self.book = Codebook(CodebookKind.HAND, np.array([[0.0, 0.0], [1.0, 1.0]]))

    def test_assigned_entry_moves_toward_mean(self):
        """Test the EMA step on one assigned entry"""
        updated = ema_update(self.book, np.array([[4.0, 2.0]]), [1], decay=0.5)
        np.testing.assert_allclose(updated.entries[1], [2.5, 1.5])
        np.testing.assert_array_equal(updated.entries[0], [0.0, 0.0])
        np.testing.assert_array_equal(self.book.entries[1], [1.0, 1.0])

    def test_dead_code_reset(self):
        """Test entries whose count decays below the threshold are reseeded from the batch"""
        book = Codebook(CodebookKind.OBJECT, np.array([[0.0, 0.0], [9.0, 9.0]]),
                        ema_counts=np.array([1.0, 0.015]))
        updated = ema_update(book, np.array([[3.0, 3.0]]), [0], decay=0.5, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(updated.entries[1], [3.0, 3.0])
        self.assertEqual(float(updated.ema_counts[1]), 1.0)

    def test_invalid_decay(self):
        """Test decay outside (0, 1)"""
        for decay in (0.0, 1.0):
            with self.subTest(decay=decay):
                with self.assertRaises(QuantizerError):
                    ema_update(self.book, np.zeros((1, 2)), [0], decay=decay)

    def test_update_codebooks_splits_hand_and_object(self):
        """Test both hand slots feed the hand codebook"""
        obj = Codebook(CodebookKind.OBJECT, np.array([[0.0, 0.0], [1.0, 1.0]]))
        inputs = {'o': np.array([[2.0, 2.0]]), 'l': np.array([[0.0, 2.0]]), 'r': np.array([[2.0, 0.0]])}
        hand, new_obj = update_codebooks(self.book, obj, np.array([[1, 1, 1]]), inputs, 0.5,
                                         np.random.default_rng(0))
        np.testing.assert_allclose(hand.entries[1], [(0.5 + 1.0) / 1.5, (0.5 + 1.0) / 1.5])
        np.testing.assert_allclose(new_obj.entries[1], [1.5, 1.5])


class LatentMaskTestCase(SimpleTestCase):
    """Test cases for latent masking"""

    def test_never_masks_all_three(self):
        """Test no row is fully masked even at high probability"""
        mask = latent_mask(500, 0.95, np.random.default_rng(0))
        self.assertFalse(mask.all(axis=1).any())
        self.assertTrue(mask.any())

    def test_zero_probability_is_identity(self):
        """Test mask_prob 0 leaves latents unchanged"""
        z = np.ones((3, 2))
        (m_o, m_l, m_r), mask = mask_latents(z, 2 * z, 3 * z, mask_prob=0.0, seed=1)
        self.assertFalse(mask.any())
        np.testing.assert_array_equal(m_l, 2 * z)

    def test_masked_latents_are_zero(self):
        """Test masked slots are zeroed and others kept"""
        z = np.ones((50, 2))
        masked, mask = mask_latents(z, z, z, mask_prob=0.5, seed=3)
        for i, m in enumerate(masked):
            with self.subTest(slot=i):
                np.testing.assert_array_equal(m[mask[:, i]], 0.0)
                np.testing.assert_array_equal(m[~mask[:, i]], 1.0)

    def test_tensor_latents_use_given_mask(self):
        """Test tensors are masked on the tape and masked slots get no gradient"""
        mask = np.array([[False, True, False], [True, False, False]])
        z = [Tensor(np.full((2, 3), v), requires_grad=True) for v in (1.0, 2.0, 3.0)]
        with Tape() as tape:
            masked, used = mask_latents(*z, mask=mask)
            total = None
            for m in masked:
                s = T.reduce_sum(m)
                total = s if total is None else T.add(total, s)
            grads = tape.backward(total)
        np.testing.assert_array_equal(used, mask)
        np.testing.assert_array_equal(masked[1].data, [[0.0] * 3, [2.0] * 3])
        np.testing.assert_array_equal(grads[z[0].node_id], [[1.0] * 3, [0.0] * 3])

    def test_invalid_probability(self):
        """Test mask_prob outside [0, 1)"""
        with self.assertRaises(QuantizerError):
            latent_mask(3, 1.0, np.random.default_rng(0))
