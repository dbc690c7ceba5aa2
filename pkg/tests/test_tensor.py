import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multitrans import tensor as T
from multitrans.errors import ContractError, NumericError, ShapeError, StateError


def fd_check(build_loss, params, eps=1e-4, tol=1e-3):
    """Compare backward() grads against central differences for each param."""
    loss = build_loss()
    T.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p, a in zip(params, analytic):
        fd = T.finite_difference_grad(lambda _: build_loss(), p, eps).data
        denom = max(np.max(np.abs(fd)), 1e-12)
        rel = np.max(np.abs(a - fd)) / denom
        assert rel < tol, f"rel err {rel} for param shape {p.shape}"


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)
        np.testing.assert_array_equal(T.matmul(b, a).data, b.data)

    def test_dot(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))
        assert "(2, 3)" in str(e.value)

    def test_grad_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = T.reduce_sum(T.matmul(a, b))
        T.backward(loss)
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, atol=1e-12)
        fd = T.finite_difference_grad(lambda t: T.reduce_sum(T.matmul(t, b)), a, 1e-5)
        np.testing.assert_allclose(a.grad, fd.data, rtol=1e-6, atol=1e-8)

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(1)
        a = T.Tensor(rng.normal(size=(5, 3, 4)))
        w = T.Tensor(rng.normal(size=(4, 2)))
        out = T.matmul(a, w)
        for i in range(5):
            np.testing.assert_allclose(out.data[i], a.data[i] @ w.data, atol=1e-14)

    def test_batched_shared_operand_grad(self):
        rng = np.random.default_rng(2)
        a = T.Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        fd_check(lambda: T.reduce_sum(T.mul(T.matmul(a, w), T.matmul(a, w))), [a, w])


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax(T.Tensor([1000.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_values(self):
        # e^x / sum(e^x) evaluated directly for x = [1, 2, 3]
        out = T.softmax(T.Tensor([1.0, 2.0, 3.0]), axis=0)
        np.testing.assert_allclose(
            out.data, [0.09003057317038046, 0.24472847105479767, 0.6652409557748219], atol=1e-12
        )

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            T.softmax(T.Tensor([np.inf, 0.0]), axis=0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_sums_to_one(self, xs):
        out = T.softmax(T.Tensor(xs), axis=0)
        assert abs(out.data.sum() - 1.0) < 1e-9
        assert np.all(out.data >= 0)

    def test_axis_on_matrix(self):
        x = T.Tensor(np.random.default_rng(3).normal(size=(4, 5)))
        out = T.softmax(x, axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(4), atol=1e-12)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5

    def test_log_one(self):
        assert T.log(T.Tensor([1.0])).data[0] == 0.0

    def test_log_nonpositive(self):
        with pytest.raises(NumericError):
            T.log(T.Tensor([0.0]))
        with pytest.raises(NumericError):
            T.log(T.Tensor([-1.0]))

    def test_gelu_exact_cdf_value(self):
        # x * Phi(x) at x = 1 with Phi the standard normal CDF (erf form)
        out = T.gelu(T.Tensor([1.0]))
        np.testing.assert_allclose(out.data[0], 0.8413447460685429, atol=1e-12)

    def test_scalar_broadcast(self):
        x = T.Tensor([[1.0, 2.0]])
        np.testing.assert_array_equal((1.0 - x).data, [[0.0, -1.0]])
        np.testing.assert_array_equal((x * 2.0).data, [[2.0, 4.0]])
        np.testing.assert_array_equal((x + 1.0).data, [[2.0, 3.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(T.zeros((2, 2)), T.zeros((2, 3)))

    def test_clamp(self):
        x = T.Tensor([-1.0, 0.5, 2.0], requires_grad=True)
        out = T.clamp(x, 0.0, 1.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])
        T.backward(T.reduce_sum(out))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestReduce:
    def test_mean(self):
        assert T.reduce_mean(T.Tensor([0.2, 0.4, 0.6])).item() == pytest.approx(0.4, abs=1e-15)

    def test_max_over_sensor_axis(self):
        out = T.reduce_max(T.Tensor([[1.0, 5.0], [7.0, 2.0]]), axis=0)
        np.testing.assert_array_equal(out.data, [7.0, 5.0])

    def test_sum_grad_is_ones(self):
        x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(T.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_max_ties_route_to_first(self):
        x = T.Tensor([[5.0, 5.0]], requires_grad=True)
        T.backward(T.reduce_sum(T.reduce_max(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0]])

    def test_empty_axis(self):
        with pytest.raises(ShapeError):
            T.reduce_sum(T.zeros((0, 3)), axis=0)

    def test_sum_order_canonical(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=17) * 10.0 ** rng.integers(-8, 8, size=17)
        a = T.reduce_sum(T.Tensor(x)).item()
        b = T.reduce_sum(T.Tensor(x[::-1].copy())).item()
        assert a == b  # bitwise


class TestConcat:
    def test_rows(self):
        out = T.concat([T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0, 4.0]])], axis=1)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0, 4.0]])

    def test_single(self):
        x = T.Tensor([[1.0, 2.0]])
        np.testing.assert_array_equal(T.concat([x], axis=0).data, x.data)

    def test_ragged(self):
        with pytest.raises(ShapeError):
            T.concat([T.zeros((2, 2)), T.zeros((3, 3))], axis=0)

    def test_backward_splits_gradient(self):
        rng = np.random.default_rng(5)
        a = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)

        def loss():
            c = T.concat([a, b], axis=1)
            return T.reduce_sum(T.mul(c, c))

        fd_check(loss, [a, b])


class TestBackward:
    def test_identity(self):
        x = T.Tensor([3.0], requires_grad=True)
        T.backward(x)
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_analytic_square(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.reduce_sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.mul(x, x))

    def test_dead_tape(self):
        x = T.Tensor([1.0], requires_grad=True)
        loss = T.reduce_sum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(StateError):
            T.backward(loss)

    def test_untracked_loss(self):
        with pytest.raises(StateError):
            T.backward(T.Tensor([1.0]))

    def test_branch_accumulation(self):
        # two branches reusing x must accumulate to the sum of branch grads
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.add(T.reduce_sum(T.mul(x, x)), T.reduce_sum(T.scale(x, 3.0))))
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, atol=1e-14)

        y = T.Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.reduce_sum(T.mul(y, y)))
        g1 = y.grad.copy()
        y2 = T.Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.reduce_sum(T.scale(y2, 3.0)))
        np.testing.assert_allclose(x.grad, g1 + y2.grad, atol=1e-14)

    def test_grad_overwritten_per_pass(self):
        x = T.Tensor([2.0], requires_grad=True)
        T.backward(T.reduce_sum(T.mul(x, x)))
        T.backward(T.reduce_sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_no_grad_context(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = T.mul(x, x)
        assert not out.requires_grad
        assert out._tape is None


class TestFiniteDifference:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.random.default_rng(6).normal(size=(2, 3)))
        fd = T.finite_difference_grad(lambda t: T.reduce_sum(t), x, 1e-4)
        np.testing.assert_allclose(fd.data, np.ones((2, 3)), atol=1e-8)

    def test_square(self):
        x = T.Tensor([3.0])
        fd = T.finite_difference_grad(lambda t: T.reduce_sum(T.mul(t, t)), x, 1e-4)
        assert fd.data[0] == pytest.approx(6.0, abs=1e-7)

    def test_restores_input(self):
        x = T.Tensor([1.0, 2.0])
        before = x.data.copy()
        T.finite_difference_grad(lambda t: T.reduce_sum(t), x, 1e-4)
        np.testing.assert_array_equal(x.data, before)


def _random_tensor(rng, requires_grad=True, positive=False):
    rank = int(rng.integers(1, 4))
    shape = tuple(int(d) for d in rng.integers(1, 6, size=rank))
    data = rng.uniform(0.1 if positive else -2.0, 2.0, size=shape)
    return T.Tensor(data, requires_grad=requires_grad)


class TestEveryOpAgainstFiniteDifferences:
    """Spec invariant: rel err < 1e-3 at eps 1e-4, random inputs in [-2, 2]."""

    def test_unary_ops(self):
        rng = np.random.default_rng(7)
        cases = [
            ("sigmoid", T.sigmoid, False),
            ("gelu", T.gelu, False),
            ("log", T.log, True),
            ("scale", lambda t: T.scale(t, -1.7), False),
            ("clamp", lambda t: T.clamp(t, -1.0, 1.0), False),
            ("softmax", lambda t: T.softmax(t, axis=-1), False),
            ("reshape", lambda t: T.reshape(t, (t.size,)), False),
        ]
        for name, op, positive in cases:
            for _ in range(3):
                x = _random_tensor(rng, positive=positive)
                if name == "clamp":
                    # keep values away from the kink where FD is one-sided
                    x.data[np.abs(np.abs(x.data) - 1.0) < 1e-3] = 0.5
                r = T.Tensor(rng.normal(size=op(T.Tensor(x.data)).shape))
                fd_check(lambda: T.reduce_sum(T.mul(op(x), r)), [x])

    def test_binary_ops(self):
        rng = np.random.default_rng(8)
        for op in (T.add, T.sub, T.mul):
            for _ in range(3):
                a = _random_tensor(rng)
                b = T.Tensor(rng.uniform(-2, 2, size=a.shape), requires_grad=True)
                r = T.Tensor(rng.normal(size=a.shape))
                fd_check(lambda: T.reduce_sum(T.mul(op(a, b), r)), [a, b])

    def test_reduce_ops(self):
        rng = np.random.default_rng(9)
        for op in (T.reduce_sum, T.reduce_mean, T.reduce_max):
            for _ in range(3):
                x = _random_tensor(rng)
                axis = int(rng.integers(0, x.ndim))
                r = T.Tensor(rng.normal(size=op(T.Tensor(x.data), axis).shape))
                fd_check(lambda: T.reduce_sum(T.mul(op(x, axis), r)), [x])
                fd_check(lambda: op(x, None), [x])

    def test_matmul_and_transpose(self):
        rng = np.random.default_rng(10)
        a = T.Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        b = T.Tensor(rng.uniform(-2, 2, size=(4, 5)), requires_grad=True)
        fd_check(lambda: T.reduce_sum(T.sigmoid(T.matmul(a, b))), [a, b])
        fd_check(lambda: T.reduce_sum(T.matmul(T.transpose(b), T.transpose(a))), [a, b])

    def test_layer_norm(self):
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.uniform(-2, 2, size=(3, 5)), requires_grad=True)
        gain = T.Tensor(rng.uniform(0.5, 1.5, size=5), requires_grad=True)
        bias = T.Tensor(rng.uniform(-0.5, 0.5, size=5), requires_grad=True)
        r = T.Tensor(rng.normal(size=(3, 5)))
        fd_check(lambda: T.reduce_sum(T.mul(T.layer_norm(x, gain, bias), r)), [x, gain, bias])


class TestInvariants:
    def test_matmul_identity_exact(self):
        rng = np.random.default_rng(12)
        a = T.Tensor(rng.normal(size=(4, 4)))
        eye = T.Tensor(np.eye(4))
        np.testing.assert_array_equal(T.matmul(eye, a).data, a.data)
        np.testing.assert_array_equal(T.matmul(a, eye).data, a.data)

    def test_tensor_shape_data_consistency(self):
        x = T.zeros((2, 3, 4))
        assert int(np.prod(x.shape)) == x.size
        x = T.Tensor(np.empty((0,)))
        assert x.size == 0

    def test_reshape_returns_new_tensor(self):
        x = T.Tensor([[1.0, 2.0]])
        y = T.reshape(x, (2,))
        assert y is not x
        assert x.shape == (1, 2) and y.shape == (2,)
