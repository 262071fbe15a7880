"""
Unit tests for the autodiff engine, layers and optimizer.
Gradients are checked against central finite differences in float64.
"""

import numpy as np
from django.test import SimpleTestCase

from hoi.nn import tensor as T
from hoi.nn.layers import GRUCell, LayerNorm, Linear, MLP, Embedding, Module, clip_gradients
from hoi.nn.optim import Adam, sum_gradients
from hoi.nn.tensor import AutodiffError, NonScalarLoss, ShapeMismatch, Tape, Tensor


def numeric_gradient(fn, array, eps=1e-6):
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + eps
        plus = fn()
        array[idx] = original - eps
        minus = fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


class TapeTestCase(SimpleTestCase):
    """Test cases for Tape recording and backward"""

    def setUp(self):
        """Set up test fixtures"""
        self.rng = np.random.default_rng(3)

    def check_gradient(self, build, *shapes):
        arrays = [self.rng.standard_normal(shape) for shape in shapes]
        params = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = build(*params)
        grads = tape.backward(loss)
        for param, array in zip(params, arrays):
            def value():
                return float(build(*[Tensor(a) for a in arrays]).data)
            expected = numeric_gradient(value, param.data)
            np.testing.assert_allclose(grads[param.node_id], expected, rtol=1e-4, atol=1e-6)

    def test_elementwise_gradients(self):
        """Test arithmetic ops against finite differences"""
        cases = {
            'add_broadcast': (lambda a, b: T.reduce_sum(T.mul(T.add(a, b), a)), (3, 4), (4,)),
            'sub': (lambda a, b: T.reduce_sum(T.square(T.sub(a, b))), (2, 3), (2, 3)),
            'div': (lambda a, b: T.reduce_sum(T.div(a, T.add(T.square(b), 1.0))), (3,), (3,)),
            'tanh_sigmoid': (lambda a, b: T.reduce_sum(T.mul(T.tanh(a), T.sigmoid(b))), (4,), (4,)),
        }
        for name, (build, *shapes) in cases.items():
            with self.subTest(op=name):
                self.check_gradient(build, *shapes)

    def test_matmul_and_softmax_gradients(self):
        """Test matmul, log_softmax and reductions"""
        self.check_gradient(lambda a, b: T.reduce_mean(T.log_softmax(T.matmul(a, b), axis=-1)[..., 1]),
                            (3, 4), (4, 5))
        self.check_gradient(lambda a: T.reduce_sum(T.mul(T.softmax(a, axis=0), a)), (4, 2))

    def test_shape_ops_gradients(self):
        """Test reshape, transpose, indexing, concat and stack"""
        self.check_gradient(lambda a: T.reduce_sum(T.square(T.transpose(T.reshape(a, (2, 6)), (1, 0))[1:4])),
                            (3, 4))
        self.check_gradient(lambda a, b: T.reduce_sum(T.mul(T.concat([a, b], axis=0), 2.0)), (2, 3), (1, 3))
        self.check_gradient(lambda a, b: T.reduce_sum(T.square(T.stack([a, b], axis=1))), (3,), (3,))
        self.check_gradient(lambda a: T.reduce_sum(T.square(T.take_rows(a, [0, 2, 0]))), (3, 2))

    def test_reduce_max_routes_to_first_winner(self):
        """Test reduce_max sends the gradient to the first maximal element"""
        a = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        with Tape() as tape:
            loss = T.reduce_sum(T.reduce_max(a, axis=-1))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[a.node_id], [[0.0, 1.0, 0.0]])

    def test_stop_gradient_and_straight_through(self):
        """Test gradient routing helpers"""
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(T.stop_gradient(a), a))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[a.node_id], [1.0, 2.0])

        with Tape() as tape:
            passed = T.straight_through(a, np.array([5.0, 7.0]))
            loss = T.reduce_sum(T.mul(passed, 3.0))
        np.testing.assert_array_equal(passed.data, [5.0, 7.0])
        np.testing.assert_array_equal(tape.backward(loss)[a.node_id], [3.0, 3.0])

    def test_ops_outside_tape_do_not_record(self):
        """Test that no record is made without an active tape"""
        a = Tensor(np.ones(3), requires_grad=True)
        out = T.mul(a, 2.0)
        self.assertFalse(out.requires_grad)
        tape = Tape()
        self.assertEqual(len(tape), 0)

    def test_backward_rejects_non_scalar(self):
        """Test NonScalarLoss for a vector loss"""
        a = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = T.mul(a, 2.0)
        with self.assertRaises(NonScalarLoss):
            tape.backward(out)

    def test_shape_mismatch(self):
        """Test ShapeMismatch for incompatible operands"""
        cases = [
            lambda: T.add(np.ones((2, 3)), np.ones((4,))),
            lambda: T.matmul(np.ones((2, 3)), np.ones((2, 3))),
            lambda: T.reshape(np.ones(5), (2, 3)),
        ]
        for i, case in enumerate(cases):
            with self.subTest(case=i):
                with self.assertRaises(ShapeMismatch):
                    case()

    def test_tape_forward_unknown_op(self):
        """Test Tape.forward with an unknown op name"""
        with self.assertRaises(AutodiffError):
            Tape().forward('convolve', Tensor(np.ones(2)))

    def test_unreached_parameter_gets_no_entry(self):
        """Test that parameters off the loss path are absent from the result"""
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = T.reduce_sum(a)
        grads = tape.backward(loss)
        self.assertIn(a.node_id, grads)
        self.assertNotIn(b.node_id, grads)
        self.assertEqual(T.gradients_for([b], grads)[0].tolist(), [0.0, 0.0])


class LayersTestCase(SimpleTestCase):
    """Test cases for parameterized layers"""

    def setUp(self):
        """Set up test fixtures"""
        self.rng = np.random.default_rng(0)

    def test_linear_shapes_and_parameters(self):
        """Test Linear output shape and parameter naming"""
        layer = Linear(4, 3, self.rng, dtype=np.float64)
        out = layer(np.ones((2, 4)))
        self.assertEqual(out.shape, (2, 3))
        self.assertEqual([name for name, _ in layer.named_parameters()], ['weight', 'bias'])
        with self.assertRaises(ShapeMismatch):
            layer(np.ones((2, 5)))

    def test_state_dict_round_trip(self):
        """Test load_state_dict restores values and rejects mismatches"""
        mlp = MLP([3, 5, 2], np.random.default_rng(1))
        other = MLP([3, 5, 2], np.random.default_rng(2))
        other.load_state_dict(mlp.state_dict())
        x = np.ones((1, 3))
        np.testing.assert_array_equal(mlp(x).data, other(x).data)

        state = mlp.state_dict()
        state.pop('layers.0.bias')
        with self.assertRaises(AutodiffError):
            other.load_state_dict(state)

    def test_zero_makes_outputs_zero(self):
        """Test Module.zero_ on an MLP"""
        mlp = MLP([3, 4, 2], self.rng)
        mlp.zero_()
        np.testing.assert_array_equal(mlp(np.ones((2, 3))).data, np.zeros((2, 2)))

    def test_layer_norm_normalizes(self):
        """Test LayerNorm gives zero mean and unit variance rows"""
        norm = LayerNorm(6, dtype=np.float64)
        out = norm(self.rng.standard_normal((3, 6)) * 5 + 2).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_embedding_range(self):
        """Test Embedding index validation"""
        embedding = Embedding(5, 3, self.rng)
        self.assertEqual(embedding([0, 4]).shape, (2, 3))
        with self.assertRaises(AutodiffError):
            embedding([5])

    def test_gru_cell_shape(self):
        """Test GRUCell keeps the hidden width"""
        cell = GRUCell(4, 6, self.rng)
        h = cell(Tensor(np.ones((2, 4))), Tensor(np.zeros((2, 6))))
        self.assertEqual(h.shape, (2, 6))

    def test_clip_gradients(self):
        """Test global-norm clipping"""
        grads = [np.array([3.0]), np.array([4.0])]
        clipped, norm = clip_gradients(grads, 1.0)
        self.assertAlmostEqual(norm, 5.0)
        self.assertAlmostEqual(float(np.sqrt(sum(g[0] ** 2 for g in clipped))), 1.0)
        unclipped, _ = clip_gradients(grads, None)
        self.assertIs(unclipped, grads)


class OptimizerTestCase(SimpleTestCase):
    """Test cases for Adam and gradient reduction"""

    def test_adam_minimizes_quadratic(self):
        """Test Adam drives a quadratic toward its minimum"""
        x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        optimizer = Adam([x], lr=0.1)
        for _ in range(300):
            with Tape() as tape:
                loss = T.reduce_sum(T.square(T.sub(x, 1.0)))
            optimizer.step(tape.backward(loss))
        np.testing.assert_allclose(x.data, [1.0, 1.0], atol=5e-2)

    def test_adam_keeps_parameter_dtype(self):
        """Test float32 parameters stay float32"""
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        Adam([x], lr=0.1).step({x.node_id: np.ones(2)})
        self.assertEqual(x.dtype, np.float32)

    def test_sum_gradients_in_order(self):
        """Test shard reduction without mutating inputs"""
        first = {1: np.array([1.0]), 2: np.array([2.0])}
        second = {1: np.array([0.5])}
        total = sum_gradients([first, second])
        np.testing.assert_array_equal(total[1], [1.5])
        np.testing.assert_array_equal(total[2], [2.0])
        np.testing.assert_array_equal(first[1], [1.0])

    def test_module_collects_nested_parameters(self):
        """Test parameter discovery through lists of modules"""
        class Pair(Module):
            def __init__(self):
                self.blocks = [Linear(2, 2, np.random.default_rng(0)), Linear(2, 1, np.random.default_rng(1))]

        names = [name for name, _ in Pair().named_parameters()]
        self.assertEqual(names, ['blocks.0.weight', 'blocks.0.bias', 'blocks.1.weight', 'blocks.1.bias'])
