"""Engine tests: frozen numeric examples, exact oracles, gradient checks.

The brute-force convolution reference and the finite-difference checker
are the oracles here; engine code is never trusted to test itself.
"""

import numpy as np
import pytest

from helpers import check_gradients, fd_gradients, relative_error

import lino.tensor as T
from lino.errors import DimensionError, NonFiniteError
from lino.tensor import Tape, Tensor, backward


def conv_reference(h, phi, beta):
    """Brute-force causal depthwise convolution, ascending-k accumulation."""
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros_like(h)
    c, d = h.shape[-2], h.shape[-1]
    for idx in np.ndindex(h.shape[:-2]):
        for ci in range(c):
            for di in range(d):
                acc = 0.0
                for k in range(di + 1):
                    acc += phi[ci, k] * h[idx + (ci, di - k)]
                out[idx + (ci, di)] = acc
    return out + np.asarray(beta)[:, None]


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_add_values(self):
        y = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(y.data, [4.0, 6.0])

    def test_sub_values(self):
        y = T.sub(Tensor([1.0, 2.0]), Tensor([3.0, 5.0]))
        np.testing.assert_array_equal(y.data, [-2.0, -3.0])

    def test_scalar_variants(self):
        x = Tensor([1.0, 2.0])
        np.testing.assert_array_equal(T.add(x, 1.0).data, [2.0, 3.0])
        np.testing.assert_array_equal(T.sub(x, 1.0).data, [0.0, 1.0])
        np.testing.assert_array_equal(T.scale(x, -2.0).data, [-2.0, -4.0])

    def test_mul_backward_product_rule(self):
        """Seeding with ones, each factor's gradient is the other factor."""
        a = Tensor([2.0, 3.0], requires_grad=True)
        b = Tensor([4.0, 5.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(a, b))
        backward(tape, loss)
        np.testing.assert_array_equal(a.grad, [4.0, 5.0])
        np.testing.assert_array_equal(b.grad, [2.0, 3.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            T.add(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_tanh_range_and_odd(self):
        x = np.linspace(-4, 4, 33)
        y = T.tanh(Tensor(x)).data
        assert np.all(np.abs(y) < 1.0)
        np.testing.assert_allclose(y, -T.tanh(Tensor(-x)).data, atol=1e-15)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "tanh", "scale"])
    def test_gradients(self, op):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        if op == "tanh":
            check_gradients(T.tanh, [a])
        elif op == "scale":
            check_gradients(lambda t: T.scale(t, 1.7), [a])
        else:
            check_gradients(getattr(T, op), [a, b])


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

class TestLinear:
    def test_worked_example(self):
        x = Tensor([1.0, 2.0])
        w = Tensor([[1.0, 0.0], [0.0, 2.0]])
        b = Tensor([0.0, 1.0])
        np.testing.assert_array_equal(T.linear(x, w, b).data, [1.0, 5.0])

    def test_batched_leading_axes(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=(2,))
        y = T.linear(Tensor(x), Tensor(w), Tensor(b))
        assert y.shape == (5, 3, 2)
        np.testing.assert_allclose(y.data, x @ w + b, atol=1e-15)

    def test_no_bias(self):
        x = Tensor([[1.0, 2.0]])
        w = Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal(T.linear(x, w).data, [[11.0]])

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            T.linear(Tensor([1.0, 2.0, 3.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        check_gradients(T.linear,
                        [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)),
                         rng.normal(size=(5,))])


# ---------------------------------------------------------------------------
# causal depthwise convolution
# ---------------------------------------------------------------------------

class TestCausalConv:
    def test_shift_kernel(self):
        """phi = [0,1,0] is a one-step delay."""
        h = Tensor([[1.0, 2.0, 3.0]])
        phi = Tensor([[0.0, 1.0, 0.0]])
        beta = Tensor([0.0])
        out = T.causal_depthwise_conv(h, phi, beta)
        np.testing.assert_array_equal(out.data, [[0.0, 1.0, 2.0]])

    def test_running_sum_kernel(self):
        h = Tensor([[1.0, 2.0, 3.0]])
        phi = Tensor([[1.0, 1.0, 1.0]])
        beta = Tensor([0.0])
        out = T.causal_depthwise_conv(h, phi, beta)
        np.testing.assert_array_equal(out.data, [[1.0, 3.0, 6.0]])

    def test_matches_reference_bitwise(self):
        """Vectorised k-loop must agree with the triple loop exactly."""
        rng = np.random.default_rng(11)
        h = rng.normal(size=(3, 4, 8))
        phi = rng.normal(size=(4, 8))
        beta = rng.normal(size=(4,))
        out = T.causal_depthwise_conv(Tensor(h), Tensor(phi), Tensor(beta))
        ref = conv_reference(h, phi, beta)
        assert np.array_equal(out.data, ref)

    def test_channels_independent(self):
        rng = np.random.default_rng(5)
        h = rng.normal(size=(3, 6))
        phi = rng.normal(size=(3, 6))
        beta = np.zeros(3)
        full = T.causal_depthwise_conv(Tensor(h), Tensor(phi), Tensor(beta)).data
        for c in range(3):
            solo = np.zeros_like(h)
            solo[c] = h[c]
            part = T.causal_depthwise_conv(Tensor(solo), Tensor(phi), Tensor(beta)).data
            np.testing.assert_array_equal(part[c], full[c])

    def test_kernel_shape_checked(self):
        with pytest.raises(DimensionError):
            T.causal_depthwise_conv(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3))),
                                    Tensor(np.zeros(2)))

    def test_gradients(self):
        rng = np.random.default_rng(13)
        check_gradients(T.causal_depthwise_conv,
                        [rng.normal(size=(2, 3, 5)), rng.normal(size=(3, 5)),
                         rng.normal(size=(3,))])


# ---------------------------------------------------------------------------
# softmax / layer norm / dropout
# ---------------------------------------------------------------------------

class TestSoftmax:
    def test_two_point_example(self):
        y = T.softmax_axis(Tensor([0.0, np.log(2.0)]), axis=0).data
        np.testing.assert_allclose(y, [1.0 / 3.0, 2.0 / 3.0], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 5, 6)) * 30.0
        for axis in (0, 1, 2):
            s = T.softmax_axis(Tensor(x), axis=axis).data
            np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)

    def test_shift_invariance(self):
        x = np.array([1.0, 2.0, 3.0])
        a = T.softmax_axis(Tensor(x), axis=0).data
        b = T.softmax_axis(Tensor(x + 100.0), axis=0).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_extreme_inputs_stay_finite(self):
        x = np.array([0.0, 1000.0, -1000.0])
        s = T.softmax_axis(Tensor(x), axis=0).data
        assert np.all(np.isfinite(s))

    def test_gradients(self):
        rng = np.random.default_rng(21)
        check_gradients(lambda t: T.softmax_axis(t, axis=-2), [rng.normal(size=(3, 4))])


class TestLayerNorm:
    def test_two_point_example(self):
        y = T.layer_norm(Tensor([1.0, 3.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]),
                         eps=1e-12).data
        np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-9)

    def test_population_variance(self):
        """Three points [0,1,2]: population std is sqrt(2/3), not 1."""
        y = T.layer_norm(Tensor([0.0, 1.0, 2.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                         eps=1e-12).data
        np.testing.assert_allclose(y, [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], atol=1e-9)

    def test_normalised_rows(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(6, 8)) * 5 + 3
        y = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)

    def test_gradients(self):
        rng = np.random.default_rng(17)
        check_gradients(T.layer_norm,
                        [rng.normal(size=(2, 3, 6)), rng.normal(size=(6,)),
                         rng.normal(size=(6,))])


class TestDropout:
    def test_eval_is_bitwise_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(7, 7)))
        y = T.dropout(x, 0.5, "eval")
        assert y is x

    def test_p_zero_train_is_identity(self):
        x = Tensor(np.ones((3, 3)))
        assert T.dropout(x, 0.0, "train") is x

    def test_keep_rate(self):
        rng = np.random.default_rng(123)
        x = Tensor(np.ones(100_000))
        y = T.dropout(x, 0.5, "train", rng).data
        keep = np.count_nonzero(y) / y.size
        assert 0.495 <= keep <= 0.505

    def test_kept_values_scaled(self):
        rng = np.random.default_rng(42)
        y = T.dropout(Tensor(np.ones(1000)), 0.2, "train", rng).data
        kept = y[y != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.8, atol=1e-15)

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, "train", np.random.default_rng(0))

    def test_mask_reused_in_backward(self):
        rng = np.random.default_rng(77)
        x = Tensor(np.ones(64), requires_grad=True)
        with Tape() as tape:
            y = T.dropout(x, 0.5, "train", rng)
            loss = T.sum_all(y)
        backward(tape, loss)
        np.testing.assert_array_equal((x.grad != 0), (y.data != 0))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

class TestShapeOps:
    def test_sum_axis_values(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        np.testing.assert_array_equal(T.sum_axis(x, 0).data, [3.0, 5.0, 7.0])
        np.testing.assert_array_equal(T.sum_axis(x, 1, keepdims=True).data, [[3.0], [12.0]])

    def test_mean_all(self):
        x = Tensor([[1.0, 2.0], [3.0, 6.0]])
        assert T.mean_all(x).item() == 3.0

    def test_concat_and_narrow_roundtrip(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
        cat = T.concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(T.narrow(cat, 1, 0, 3).data, a)
        np.testing.assert_array_equal(T.narrow(cat, 1, 3, 5).data, b)

    def test_narrow_bounds(self):
        with pytest.raises(DimensionError):
            T.narrow(Tensor(np.zeros((2, 4))), 1, 2, 3)

    def test_transpose_involution(self):
        x = np.random.default_rng(4).normal(size=(2, 3, 4))
        y = T.transpose(T.transpose(Tensor(x), (1, 0, 2)), (1, 0, 2)).data
        np.testing.assert_array_equal(y, x)

    def test_repeat_axis(self):
        x = Tensor([[1.0], [2.0]])
        np.testing.assert_array_equal(
            T.repeat_axis(x, 1, 3).data, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        with pytest.raises(DimensionError):
            T.repeat_axis(x, 0, 2)

    @pytest.mark.parametrize("op,shape", [
        ("sum0", (3, 4)), ("sumk", (3, 4)), ("mean", (3, 4)), ("sum_all", (3, 4)),
        ("concat", (2, 3)), ("narrow", (4, 6)), ("transpose", (2, 3, 4)),
        ("reshape", (3, 4)), ("repeat", (3, 1)),
    ])
    def test_gradients(self, op, shape):
        rng = np.random.default_rng(hash(op) % 2**32)
        x = rng.normal(size=shape)
        builders = {
            "sum0": lambda t: T.sum_axis(t, 0),
            "sumk": lambda t: T.sum_axis(t, 1, keepdims=True),
            "mean": lambda t: T.mean_axis(t, -1),
            "sum_all": T.sum_all,
            "concat": lambda t: T.concat([t, T.scale(t, 2.0)], axis=0),
            "narrow": lambda t: T.narrow(t, 1, 2, 3),
            "transpose": lambda t: T.transpose(t, (2, 0, 1)),
            "reshape": lambda t: T.reshape(t, (2, 6)),
            "repeat": lambda t: T.repeat_axis(t, 1, 4),
        }
        check_gradients(builders[op], [x])


# ---------------------------------------------------------------------------
# tape mechanics
# ---------------------------------------------------------------------------

class TestTape:
    def test_creation_order_is_topological(self):
        a = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            b = T.scale(a, 2.0)
            c = T.add(b, a)       # diamond: a feeds both b and c
            loss = T.sum_all(T.mul(c, c))
        outs = [id(n.out) for n in tape.nodes]
        assert outs.index(id(b)) < outs.index(id(c))
        backward(tape, loss)
        # d/da (3a)^2 = 18a = 18
        np.testing.assert_allclose(a.grad, [18.0], atol=1e-12)

    def test_fanout_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = T.add(T.mul(x, x), x)
        backward(tape, T.sum_all(y) if y.size != 1 else y)
        np.testing.assert_allclose(x.grad, [7.0], atol=1e-12)

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        assert y.requires_grad is False

    def test_nested_tapes_restore(self):
        with Tape() as outer:
            x = Tensor([1.0], requires_grad=True)
            with Tape() as inner:
                T.scale(x, 2.0)
            T.scale(x, 3.0)
        assert len(inner) == 1 and len(outer) == 1

    def test_backward_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(DimensionError):
            backward(tape, y)

    def test_grad_shapes_match_leaves(self):
        rng = np.random.default_rng(6)
        leaves = [Tensor(rng.normal(size=s), requires_grad=True)
                  for s in [(2, 3), (3, 4), (4,)]]
        with Tape() as tape:
            h = T.linear(leaves[0], leaves[1], leaves[2])
            loss = T.sum_all(T.tanh(h))
        grads = backward(tape, loss)
        for leaf in leaves:
            assert grads[leaf].shape == leaf.shape

    def test_constant_branch_gets_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        c = Tensor([5.0])
        with Tape() as tape:
            y = T.mul(x, c)
        backward(tape, y)
        assert c.grad is None and x.grad is not None

    def test_nonfinite_forward_raises(self):
        big = Tensor([1e308])
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            T.mul(big, big)


class TestFiniteDifferenceOracle:
    def test_checker_catches_wrong_gradient(self):
        """The oracle itself must be able to fail: feed it a broken vjp."""
        def bad_op(t):
            # correct forward, broken backward (off by 2x)
            return T._record(np.tanh(t.data), (t,),
                             lambda g: (2.0 * g * (1 - np.tanh(t.data) ** 2),), "bad")
        with pytest.raises(AssertionError):
            check_gradients(bad_op, [np.random.default_rng(0).normal(size=(3,))])

    def test_fd_on_quadratic(self):
        g = fd_gradients(lambda a: float((a * a).sum()), [np.array([1.0, -2.0])])[0]
        np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)

    def test_relative_error_scale(self):
        assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0
