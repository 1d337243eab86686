"""Tests for the differentiable array core and its gradient checks"""

import math

import numpy as np
import pytest

from atnbreak import tensor as T
from atnbreak.gradcheck import check_gradients, relative_error
from atnbreak.tensor import ComputationRecord, DiffArray, backward
from atnbreak.utils import ComputationRecordError, ShapeError


def _weighted_sum(out: DiffArray, seed: int = 0) -> DiffArray:
    """Scalar loss with a non-uniform upstream gradient"""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.reduce_sum(T.mul(out, T.constant(w)))


# name -> (input shapes builder, loss builder)
OP_CASES = {
    "add": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 4))},
            lambda x: _weighted_sum(T.add(x["a"], x["b"]))),
    "sub": (lambda r: {"a": r.normal(size=(5,)), "b": r.normal(size=(5,))},
            lambda x: _weighted_sum(T.sub(x["a"], x["b"]))),
    "mul": (lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 3))},
            lambda x: _weighted_sum(T.mul(x["a"], x["b"]))),
    "scalar_mul": (lambda r: {"a": r.normal(size=(4,)), "s": r.normal(size=())},
                   lambda x: _weighted_sum(T.mul(x["a"], x["s"]))),
    "square": (lambda r: {"a": r.normal(size=(3, 3))},
               lambda x: _weighted_sum(T.square(x["a"]))),
    "sqrt": (lambda r: {"a": r.uniform(0.5, 2.0, size=(6,))},
             lambda x: _weighted_sum(T.sqrt(x["a"]))),
    "gelu": (lambda r: {"a": r.normal(size=(2, 5))},
             lambda x: _weighted_sum(T.gelu(x["a"]))),
    "matmul": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4, 2))},
               lambda x: _weighted_sum(T.matmul(x["a"], x["b"]))),
    "matmul_stacked": (lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(2, 4, 3))},
                       lambda x: _weighted_sum(T.matmul(x["a"], x["b"]))),
    "matmul_shared_rhs": (lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4, 5))},
                          lambda x: _weighted_sum(T.matmul(x["a"], x["b"]))),
    "add_bias": (lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4,))},
                 lambda x: _weighted_sum(T.add_bias(x["a"], x["b"]))),
    "softmax_rows": (lambda r: {"a": r.normal(size=(3, 5))},
                     lambda x: _weighted_sum(T.softmax_rows(x["a"]))),
    "layer_norm": (lambda r: {"a": r.normal(size=(3, 6)), "g": r.normal(size=(6,)), "b": r.normal(size=(6,))},
                   lambda x: _weighted_sum(T.layer_norm(x["a"], x["g"], x["b"]))),
    "reduce_sum_axis": (lambda r: {"a": r.normal(size=(3, 4, 2))},
                        lambda x: _weighted_sum(T.reduce_sum(x["a"], axes=1))),
    "reduce_mean": (lambda r: {"a": r.normal(size=(3, 4))},
                    lambda x: _weighted_sum(T.reduce_mean(x["a"], axes=(0,)))),
    "l2norm": (lambda r: {"a": r.normal(size=(7,))},
               lambda x: T.l2norm(x["a"])),
    "reshape_transpose": (lambda r: {"a": r.normal(size=(2, 3, 4))},
                          lambda x: _weighted_sum(T.transpose(T.reshape(x["a"], (6, 4)), (1, 0)))),
    "index": (lambda r: {"a": r.normal(size=(4, 5))},
              lambda x: _weighted_sum(T.index(x["a"], (slice(1, 3), 2)))),
    "concat": (lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(1, 3))},
               lambda x: _weighted_sum(T.concat([x["a"], x["b"]], axis=0))),
    "broadcast_leading": (lambda r: {"a": r.normal(size=(3, 2))},
                          lambda x: _weighted_sum(T.broadcast_leading(x["a"], (4,)))),
    "cross_entropy": (lambda r: {"a": r.normal(size=(5, 3))},
                      lambda x: T.cross_entropy(x["a"], np.array([0, 2, 1, 1, 0]))),
}


GRADCHECK_CASES = 100


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_match_central_differences(op):
    make_inputs, build_loss = OP_CASES[op]
    for seed in range(GRADCHECK_CASES):
        inputs = make_inputs(np.random.default_rng(seed))
        errors = check_gradients(build_loss, inputs)
        assert max(errors.values()) < 1e-6, (seed, errors)


class TestElementwise:
    def test_add(self):
        out = T.add(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        np.testing.assert_array_equal(out.values, [4.0, 6.0])

    def test_gelu_zero(self):
        assert T.gelu(np.array(0.0)).item() == 0.0

    def test_gelu_constants(self):
        assert T.GELU_C == pytest.approx(0.7978845608028654, abs=1e-16)
        assert T.GELU_K == 0.044715

    def test_square_gradient_at_three(self):
        record = ComputationRecord()
        x = record.watch(np.array(3.0))
        grads = record.backward(T.square(x))
        assert float(grads[x]) == pytest.approx(6.0)
        f = lambda v: v * v
        central = (f(3.0 + 1e-5) - f(3.0 - 1e-5)) / 2e-5
        assert abs(float(grads[x]) - central) < 1e-8

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            T.add(np.zeros(2), np.zeros(3))

    def test_sqrt_gradient_zero_at_zero(self):
        record = ComputationRecord()
        x = record.watch(np.array([0.0, 4.0]))
        grads = record.backward(T.reduce_sum(T.sqrt(x)))
        np.testing.assert_allclose(grads[x], [0.0, 0.25])

    def test_operators_dispatch(self):
        a = T.constant([1.0, 2.0])
        np.testing.assert_array_equal((a * 2).values, [2.0, 4.0])
        np.testing.assert_array_equal((-a).values, [-1.0, -2.0])
        np.testing.assert_array_equal((a - a).values, [0.0, 0.0])

    def test_elementwise_dispatch(self):
        np.testing.assert_array_equal(T.elementwise("mul", np.ones(2), np.full(2, 3.0)).values, [3.0, 3.0])
        with pytest.raises(ValueError):
            T.elementwise("cube", np.ones(2))


class TestMatmul:
    def test_identity(self):
        out = T.matmul(np.eye(2), np.array([[2.0, 3.0], [4.0, 5.0]]))
        np.testing.assert_array_equal(out.values, [[2.0, 3.0], [4.0, 5.0]])

    def test_row_times_column(self):
        out = T.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.values, [[11.0]])

    def test_gradient_of_sum_is_ones_times_b_transpose(self):
        b = np.random.default_rng(0).normal(size=(4, 3))
        record = ComputationRecord()
        a = record.watch(np.random.default_rng(1).normal(size=(2, 4)))
        grads = record.backward(T.reduce_sum(T.matmul(a, T.constant(b))))
        np.testing.assert_allclose(grads[a], np.ones((2, 3)) @ b.T)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


class TestSoftmax:
    def test_zeros(self):
        np.testing.assert_allclose(T.softmax_rows(np.zeros(2)).values, [0.5, 0.5])

    def test_large_logits_are_stable(self):
        np.testing.assert_allclose(T.softmax_rows(np.array([1000.0, 1000.0])).values, [0.5, 0.5])

    def test_log_inputs(self):
        out = T.softmax_rows(np.log([1.0, 2.0, 3.0])).values
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(np.ones((1, 3)), np.ones(3), np.zeros(3)).values
        np.testing.assert_allclose(out, np.zeros((1, 3)))

    def test_already_normalised_row(self):
        out = T.layer_norm(np.array([-1.0, 1.0]), np.ones(2), np.zeros(2)).values
        expected = np.array([-1.0, 1.0]) / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_gain_shape_checked(self):
        with pytest.raises(ShapeError):
            T.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


class TestReductions:
    def test_l2norm(self):
        assert T.l2norm(np.array([3.0, 4.0])).item() == 5.0

    def test_mean(self):
        assert T.reduce_mean(np.array([2.0, 4.0])).item() == 3.0

    def test_sum_gradient_is_ones(self):
        record = ComputationRecord()
        x = record.watch(np.random.default_rng(0).normal(size=(2, 3, 2)))
        grads = backward(record, T.reduce_sum(x))
        np.testing.assert_array_equal(grads[x], np.ones((2, 3, 2)))

    def test_l2norm_gradient_zero_at_origin(self):
        record = ComputationRecord()
        x = record.watch(np.zeros(3))
        grads = record.backward(T.l2norm(x))
        np.testing.assert_array_equal(grads[x], np.zeros(3))

    def test_reduce_dispatch(self):
        assert T.reduce(np.array([1.0, 2.0]), "sum").item() == 3.0
        with pytest.raises(ValueError):
            T.reduce(np.ones(2), "max")


class TestRecord:
    def test_square_central_difference(self):
        record = ComputationRecord()
        x = record.watch(np.array(3.0))
        grads = record.backward(T.square(x))
        central = (3.001**2 - 2.999**2) / 0.002
        assert abs(float(grads[x]) - central) < 1e-6

    def test_non_scalar_loss(self):
        record = ComputationRecord()
        x = record.watch(np.ones(3))
        with pytest.raises(ShapeError):
            record.backward(T.scale(x, 2.0))

    def test_loss_from_another_record(self):
        r1, r2 = ComputationRecord(), ComputationRecord()
        x = r1.watch(np.ones(2))
        with pytest.raises(ComputationRecordError):
            r2.backward(T.reduce_sum(x))

    def test_record_is_consumed(self):
        record = ComputationRecord()
        x = record.watch(np.ones(2))
        loss = T.reduce_sum(x)
        record.backward(loss)
        assert record.consumed
        with pytest.raises(ComputationRecordError):
            record.backward(loss)
        with pytest.raises(ComputationRecordError):
            record.watch(np.ones(1))

    def test_mixed_records_rejected(self):
        a = ComputationRecord().watch(np.ones(2))
        b = ComputationRecord().watch(np.ones(2))
        with pytest.raises(ComputationRecordError):
            T.add(a, b)

    def test_unreachable_leaf_gets_zeros(self):
        record = ComputationRecord()
        x = record.watch(np.ones(2))
        unused = record.watch(np.ones((3, 3)))
        grads = record.backward(T.reduce_sum(x))
        np.testing.assert_array_equal(grads[unused], np.zeros((3, 3)))

    def test_shared_node_gradients_accumulate(self):
        record = ComputationRecord()
        x = record.watch(np.array([2.0]))
        y = T.mul(x, x)
        grads = record.backward(T.reduce_sum(T.add(y, x)))
        np.testing.assert_allclose(grads[x], [5.0])

    def test_constants_carry_no_gradient(self):
        record = ComputationRecord()
        x = record.watch(np.ones(2))
        c = T.constant(np.ones(2))
        grads = record.backward(T.reduce_sum(T.mul(x, c)))
        with pytest.raises(ComputationRecordError):
            grads[c]

    def test_inputs_are_never_mutated(self):
        source = np.array([1.0, -2.0, 3.0])
        record = ComputationRecord()
        x = record.watch(source)
        record.backward(T.reduce_sum(T.square(x)))
        np.testing.assert_array_equal(source, [1.0, -2.0, 3.0])
        assert not x.values.flags.writeable

    def test_record_kinds_in_order(self):
        record = ComputationRecord()
        x = record.watch(np.ones(2))
        T.reduce_sum(T.gelu(x))
        assert record.kinds == ["gelu", "sum"]


def test_relative_error_guard():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
