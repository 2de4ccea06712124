import math

import numpy as np
import pytest
import scipy.sparse as sp

from graph_moe.autodiff import ops
from graph_moe.autodiff.grad_check import grad_check
from graph_moe.autodiff.ops import ElementwiseKind, EmptyMaskError
from graph_moe.autodiff.tape import DimensionError, DomainError, NonFiniteError, Parameter, Tape, backward
from graph_moe.rng import RngState


def _fixed_weights(shape, seed=7):
    return np.random.default_rng(seed).uniform(-2.0, 2.0, size=shape)


def _linear_loss(node, seed=7):
    """Random linear functional of a node, so every output entry reaches the loss with a distinct weight."""
    return ops.sum_all(node * node.tape.constant(_fixed_weights(node.shape, seed)))


class TestMatmul:

    def test_identity(self):
        tape = Tape()
        m = tape.constant([[1.0, 2.0], [3.0, 4.0]])
        out = ops.matmul(tape.constant(np.eye(2)), m)
        np.testing.assert_array_equal(out.value, m.value)

    def test_hand_example(self):
        tape = Tape()
        out = tape.constant([[1.0, 2.0], [3.0, 4.0]]) @ tape.constant([[1.0], [1.0]])
        np.testing.assert_array_equal(out.value, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            ops.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))

    def test_grad_check(self, sample_rng):
        a = sample_rng.uniform(-2, 2, (2, 3))
        b = sample_rng.uniform(-2, 2, (3, 2))
        err = grad_check(lambda tape, n: _linear_loss(ops.matmul(n[0], n[1])), [a, b])
        assert err < 1e-5


class TestSpmm:

    def test_identity(self):
        tape = Tape()
        h = tape.constant(_fixed_weights((4, 3)))
        out = ops.spmm(sp.identity(4, format="csr"), h)
        np.testing.assert_array_equal(out.value, h.value)

    def test_path_graph_rows(self, path_graph):
        tape = Tape()
        a_hat = path_graph.normalized_adjacency
        out = ops.spmm(a_hat, tape.constant(np.eye(3)))
        np.testing.assert_allclose(out.value, a_hat.toarray(), atol=1e-12)

    def test_matches_dense(self):
        for seed in range(5):
            s = sp.random(5, 5, density=0.4, format="csr", random_state=seed)
            d = _fixed_weights((5, 3), seed)
            tape = Tape()
            sparse_out = ops.spmm(s, tape.constant(d))
            dense_out = ops.matmul(tape.constant(s.toarray()), tape.constant(d))
            np.testing.assert_allclose(sparse_out.value, dense_out.value, atol=1e-12)

    def test_grad_matches_dense(self):
        s = sp.random(5, 5, density=0.4, format="csr", random_state=3)
        d = _fixed_weights((5, 3))
        sparse_tape = Tape()
        sparse_d = sparse_tape.variable(d)
        backward(sparse_tape, _linear_loss(ops.spmm(s, sparse_d)))
        dense_tape = Tape()
        dense_d = dense_tape.variable(d)
        backward(dense_tape, _linear_loss(ops.matmul(dense_tape.constant(s.toarray()), dense_d)))
        np.testing.assert_allclose(sparse_d.grad, dense_d.grad, atol=1e-10)

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            ops.spmm(sp.identity(3, format="csr"), tape.constant(np.ones((4, 2))))


class TestElementwise:

    def test_relu(self):
        tape = Tape()
        np.testing.assert_array_equal(ops.relu(tape.constant([[-1.0, 2.0]])).value, [[0.0, 2.0]])

    def test_swish_and_sigmoid_at_zero(self):
        tape = Tape()
        zero = tape.constant([[0.0]])
        assert ops.elementwise(ElementwiseKind.SWISH, zero).value[0, 0] == 0.0
        assert ops.sigmoid(zero).value[0, 0] == 0.5

    def test_leaky_relu_slope(self):
        tape = Tape()
        out = ops.elementwise(ElementwiseKind.LEAKY_RELU, tape.constant([[-1.0, 3.0]]))
        np.testing.assert_allclose(out.value, [[-0.2, 3.0]])

    def test_log_of_non_positive(self):
        tape = Tape()
        with pytest.raises(DomainError):
            ops.elementwise(ElementwiseKind.LOG, tape.constant([[1.0, 0.0]]))

    def test_binary_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            ops.elementwise(ElementwiseKind.ADD, tape.constant(np.ones((2, 2))), tape.constant(np.ones((2, 3))))

    def test_non_finite_rejected(self):
        tape = Tape()
        with pytest.raises(NonFiniteError):
            ops.elementwise(ElementwiseKind.EXP, tape.constant([[1000.0]]))

    @pytest.mark.parametrize("kind", [
        ElementwiseKind.RELU,
        ElementwiseKind.LEAKY_RELU,
        ElementwiseKind.SIGMOID,
        ElementwiseKind.SWISH,
        ElementwiseKind.GELU,
        ElementwiseKind.EXP,
    ])
    def test_unary_grad_check(self, kind, sample_rng):
        x = sample_rng.uniform(-2, 2, (3, 3))
        assert grad_check(lambda tape, n: _linear_loss(ops.elementwise(kind, n[0])), [x]) < 1e-4

    def test_log_grad_check(self, sample_rng):
        x = sample_rng.uniform(0.5, 2, (3, 3))
        err = grad_check(lambda tape, n: _linear_loss(ops.elementwise(ElementwiseKind.LOG, n[0])), [x])
        assert err < 1e-4

    @pytest.mark.parametrize("kind", [ElementwiseKind.ADD, ElementwiseKind.SUB, ElementwiseKind.HADAMARD])
    def test_binary_grad_check(self, kind, sample_rng):
        a = sample_rng.uniform(-2, 2, (3, 3))
        b = sample_rng.uniform(-2, 2, (3, 3))
        assert grad_check(lambda tape, n: _linear_loss(ops.elementwise(kind, n[0], n[1])), [a, b]) < 1e-4

    def test_scale_by_node_grad_check(self, sample_rng):
        a = sample_rng.uniform(-2, 2, (3, 3))
        factor = np.array([[0.7]])
        err = grad_check(lambda tape, n: _linear_loss(ops.elementwise(ElementwiseKind.SCALE, n[0], n[1])), [a, factor])
        assert err < 1e-4


class TestSoftmax:

    def test_zero_row_is_uniform(self):
        tape = Tape()
        for temperature in (0.1, 1.0, 5.0):
            out = ops.rowwise_softmax(tape.constant(np.zeros((1, 4))), temperature)
            np.testing.assert_allclose(out.value, 0.25)

    def test_hand_example(self):
        tape = Tape()
        out = ops.rowwise_softmax(tape.constant([[math.log(1.0), math.log(3.0)]]))
        np.testing.assert_allclose(out.value, [[0.25, 0.75]])

    def test_rows_on_simplex_and_argmax_kept(self):
        tape = Tape()
        logits = _fixed_weights((6, 5))
        for temperature in (0.2, 1.0, 3.0):
            out = ops.rowwise_softmax(tape.constant(logits), temperature).value
            assert np.all(out >= 0)
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
            np.testing.assert_array_equal(np.argmax(out, axis=1), np.argmax(logits, axis=1))

    def test_non_positive_temperature(self):
        tape = Tape()
        with pytest.raises(DomainError):
            ops.rowwise_softmax(tape.constant([[0.0, 1.0]]), 0.0)

    def test_grad_check(self, sample_rng):
        x = sample_rng.uniform(-2, 2, (3, 4))
        assert grad_check(lambda tape, n: _linear_loss(ops.rowwise_softmax(n[0], 0.7)), [x]) < 1e-4


class TestLayerNorm:

    def _unit(self, tape, cols):
        return tape.constant(np.ones((1, cols))), tape.constant(np.zeros((1, cols)))

    def test_constant_row(self):
        tape = Tape()
        out = ops.layer_norm(tape.constant([[3.0, 3.0, 3.0]]), *self._unit(tape, 3))
        np.testing.assert_allclose(out.value, 0.0, atol=1e-12)

    def test_hand_example(self):
        tape = Tape()
        out = ops.layer_norm(tape.constant([[1.0, -1.0]]), *self._unit(tape, 2))
        np.testing.assert_allclose(out.value, [[1.0, -1.0]], atol=1e-4)

    def test_standardised_rows(self):
        tape = Tape()
        out = ops.layer_norm(tape.constant(_fixed_weights((4, 6))), *self._unit(tape, 6)).value
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            ops.layer_norm(tape.constant(np.ones((2, 3))), *self._unit(tape, 2))

    def test_grad_check(self, sample_rng):
        x = sample_rng.uniform(-2, 2, (2, 4))
        gain = sample_rng.uniform(0.5, 1.5, (1, 4))
        bias = sample_rng.uniform(-1, 1, (1, 4))
        err = grad_check(lambda tape, n: _linear_loss(ops.layer_norm(n[0], n[1], n[2])), [x, gain, bias])
        assert err < 1e-4


class TestDropout:

    def test_rate_zero_is_identity(self):
        tape = Tape()
        x = tape.constant(_fixed_weights((3, 3)))
        assert ops.dropout(x, 0.0, RngState(0), training=True) is x

    def test_eval_is_identity(self):
        tape = Tape()
        x = tape.constant(_fixed_weights((3, 3)))
        assert ops.dropout(x, 0.9, RngState(0), training=False) is x

    def test_survivor_fraction(self):
        tape = Tape()
        out = ops.dropout(tape.constant(np.ones((1000, 100))), 0.5, RngState(0), training=True)
        survivors = np.mean(out.value != 0)
        assert 0.49 <= survivors <= 0.51
        np.testing.assert_allclose(out.value[out.value != 0], 2.0)

    def test_rate_one_rejected(self):
        tape = Tape()
        with pytest.raises(DomainError):
            ops.dropout(tape.constant(np.ones((2, 2))), 1.0, RngState(0), training=True)

    def test_grad_check(self, sample_rng):
        x = sample_rng.uniform(-2, 2, (4, 4))
        err = grad_check(lambda tape, n: _linear_loss(ops.dropout(n[0], 0.3, RngState(5), True)), [x])
        assert err < 1e-4


class TestReductions:

    def test_mean_rows(self):
        tape = Tape()
        np.testing.assert_array_equal(ops.mean_rows(tape.constant([[0.0, 2.0], [2.0, 0.0]])).value, [[1.0, 1.0]])
        single = tape.constant([[4.0, 5.0]])
        np.testing.assert_array_equal(ops.mean_rows(single).value, single.value)

    def test_mean_rows_grad_check(self, sample_rng):
        x = sample_rng.uniform(-2, 2, (5, 3))
        assert grad_check(lambda tape, n: _linear_loss(ops.mean_rows(n[0])), [x]) < 1e-6

    def test_row_scale_grad_check(self, sample_rng):
        h = sample_rng.uniform(-2, 2, (4, 3))
        w = sample_rng.uniform(-2, 2, (4, 1))
        assert grad_check(lambda tape, n: _linear_loss(ops.row_scale(n[0], n[1])), [h, w]) < 1e-4

    def test_column_and_entry_grad_check(self, sample_rng):
        x = sample_rng.uniform(-2, 2, (3, 4))
        err = grad_check(
            lambda tape, n: _linear_loss(ops.column(n[0], 2)) + ops.elementwise(
                ElementwiseKind.SCALE, ops.entry(n[0], 1, 3), 2.5
            ),
            [x],
        )
        assert err < 1e-6


class TestCrossEntropy:

    def test_uniform_logits(self):
        tape = Tape()
        onehot = np.eye(4)
        loss = ops.softmax_cross_entropy(tape.constant(np.zeros((4, 4))), onehot, [0, 1, 2, 3])
        assert loss.value[0, 0] == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_margin(self):
        tape = Tape()
        loss = ops.softmax_cross_entropy(tape.constant([[30.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]), [0])
        assert loss.value[0, 0] < 1e-9

    def test_hand_example(self):
        tape = Tape()
        loss = ops.softmax_cross_entropy(tape.constant([[1.0, 0.0]]), np.array([[1.0, 0.0]]), [0])
        assert loss.value[0, 0] == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert loss.value[0, 0] == pytest.approx(0.3133, abs=1e-4)

    def test_empty_mask(self):
        tape = Tape()
        with pytest.raises(EmptyMaskError):
            ops.softmax_cross_entropy(tape.constant(np.zeros((2, 2))), np.eye(2), [])

    def test_rejects_non_onehot_rows(self):
        tape = Tape()
        with pytest.raises(DomainError):
            ops.softmax_cross_entropy(tape.constant(np.zeros((2, 2))), np.array([[1.0, 1.0], [0.0, 1.0]]), [0])

    def test_unmasked_rows_get_no_gradient(self, sample_rng):
        tape = Tape()
        logits = tape.variable(sample_rng.uniform(-2, 2, (4, 3)))
        onehot = np.eye(3)[[0, 1, 2, 0]]
        backward(tape, ops.softmax_cross_entropy(logits, onehot, [1, 3]))
        np.testing.assert_array_equal(logits.grad[[0, 2]], 0.0)

    def test_grad_check(self, sample_rng):
        x = sample_rng.uniform(-2, 2, (5, 3))
        onehot = np.eye(3)[[0, 2, 1, 1, 0]]
        err = grad_check(lambda tape, n: ops.softmax_cross_entropy(n[0], onehot, [0, 2, 3]), [x])
        assert err < 1e-4


class TestGumbelSoftmax:

    def test_hard_rows_one_hot(self):
        tape = Tape()
        out = ops.gumbel_softmax(tape.constant(_fixed_weights((10, 4))), 1.0, True, RngState(1), training=True).value
        assert set(np.unique(out)) <= {0.0, 1.0}
        np.testing.assert_array_equal(out.sum(axis=1), 1.0)

    def test_eval_selects_argmax(self):
        tape = Tape()
        out = ops.gumbel_softmax(tape.constant([[0.0, 5.0, 1.0]]), 1.0, True, RngState(1), training=False)
        np.testing.assert_array_equal(out.value, [[0.0, 1.0, 0.0]])

    def test_selection_frequency(self):
        tape = Tape()
        logits = np.tile([0.0, math.log(3.0)], (100_000, 1))
        out = ops.gumbel_softmax(tape.constant(logits), 1.0, True, RngState(0), training=True)
        frequency = out.value[:, 1].mean()
        assert 0.73 <= frequency <= 0.77

    def test_straight_through_gradient(self, sample_rng):
        logits = sample_rng.uniform(-2, 2, (3, 4))
        readout = _fixed_weights((3, 4), 11)
        grads = []
        for hard in (True, False):
            tape = Tape()
            node = tape.variable(logits)
            out = ops.gumbel_softmax(node, 0.5, hard, RngState(9), training=True)
            backward(tape, ops.sum_all(out * tape.constant(readout)))
            grads.append(node.grad)
        np.testing.assert_allclose(grads[0], grads[1], atol=1e-12)

    def test_soft_grad_check(self, sample_rng):
        x = sample_rng.uniform(-2, 2, (3, 4))
        err = grad_check(lambda tape, n: _linear_loss(ops.gumbel_softmax(n[0], 0.7, False, RngState(3), True)), [x])
        assert err < 1e-4

    def test_non_positive_temperature(self):
        tape = Tape()
        with pytest.raises(DomainError):
            ops.gumbel_softmax(tape.constant([[0.0, 1.0]]), -1.0, True, RngState(0), training=True)


class TestGatAggregate:

    def test_uniform_scores_average_neighbourhood(self, path_graph):
        tape = Tape()
        h = tape.constant(np.array([[3.0], [6.0], [9.0]]))
        zeros = tape.constant(np.zeros((3, 1)))
        out = ops.gat_aggregate(path_graph.attention_pattern, h, zeros, zeros)
        np.testing.assert_allclose(out.value, [[4.5], [6.0], [7.5]])

    def test_grad_check(self, path_graph, sample_rng):
        h = sample_rng.uniform(-2, 2, (3, 2))
        src = sample_rng.uniform(-2, 2, (3, 1))
        dst = sample_rng.uniform(-2, 2, (3, 1))
        pattern = path_graph.attention_pattern
        err = grad_check(lambda tape, n: _linear_loss(ops.gat_aggregate(pattern, n[0], n[1], n[2])), [h, src, dst])
        assert err < 1e-4

    def test_empty_row_rejected(self):
        tape = Tape()
        pattern = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        zeros = tape.constant(np.zeros((2, 1)))
        with pytest.raises(DomainError):
            ops.gat_aggregate(pattern, tape.constant(np.ones((2, 2))), zeros, zeros)


class TestBackward:

    def test_sum_of_parameter(self):
        tape = Tape()
        param = Parameter("w", _fixed_weights((2, 3)))
        backward(tape, ops.sum_all(tape.parameter(param)))
        np.testing.assert_array_equal(tape.grad_for(param), np.ones((2, 3)))

    def test_half_squared_norm(self):
        tape = Tape()
        param = Parameter("w", _fixed_weights((3, 2)))
        w = tape.parameter(param)
        backward(tape, ops.elementwise(ElementwiseKind.SCALE, ops.sum_all(w * w), 0.5))
        np.testing.assert_allclose(tape.grad_for(param), param.value)

    def test_unreachable_node_has_zero_grad(self):
        tape = Tape()
        used = tape.variable([[1.0, 2.0]])
        unused = tape.variable([[3.0]])
        backward(tape, ops.sum_all(used))
        np.testing.assert_array_equal(unused.grad, [[0.0]])

    def test_non_scalar_loss(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            backward(tape, tape.variable(np.ones((2, 2))))

    def test_parameter_reused_once_per_tape(self):
        tape = Tape()
        param = Parameter("w", np.array([[2.0]]))
        assert tape.parameter(param) is tape.parameter(param)
        assert len(tape.parameter_grads()) == 1

    def test_deterministic_forward(self):
        values = []
        for _ in range(2):
            tape = Tape()
            x = tape.constant(_fixed_weights((20, 5)))
            out = ops.gumbel_softmax(ops.dropout(x, 0.5, RngState(4), True), 1.0, False, RngState(4), True)
            values.append(out.value)
        np.testing.assert_array_equal(values[0], values[1])
