import math

import numpy as np
import pytest

from cttnet import tensor as T
from cttnet.gradcheck import check_gradients, numerical_gradient, relative_error
from cttnet.tensor import Tape, TapeError, Tensor


def grad_of(fn, *arrays):
    """Analytic gradients of scalar fn(*tensors) w.r.t. each input."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        tape.backward(fn(*ts))
    return [t.grad for t in ts]


def assert_gradcheck(fn, *arrays, tol=1e-4):
    ts = [Tensor(np.array(a, dtype=float)) for a in arrays]
    params = {f"x{i}": t for i, t in enumerate(ts)}
    report = check_gradients(lambda: fn(*ts), params)
    assert report.passed, report.errors


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_hand_example(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_gradcheck(self, rng):
        assert_gradcheck(lambda a, b: T.sum(T.square(T.matmul(a, b))), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))

    def test_batched_gradcheck(self, rng):
        assert_gradcheck(
            lambda a, b: T.sum(T.square(T.matmul(a, b))), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))
        )
        assert_gradcheck(lambda a, b: T.sum(T.square(a @ b)), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_values(self):
        e = [math.exp(v) for v in (1, 2, 3)]
        expected = [v / sum(e) for v in e]
        out = T.softmax(Tensor([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, expected, atol=1e-15)
        np.testing.assert_allclose(out, [0.090031, 0.244728, 0.665241], atol=5e-7)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1, 0, 0], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = T.softmax(Tensor(rng.normal(scale=10, size=(5, 7)))).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradcheck(self, rng):
        w = rng.normal(size=(3, 5))
        assert_gradcheck(lambda x: T.sum(T.mul(T.softmax(x), w)), rng.normal(size=(3, 5)))


class TestLayerNorm:
    def test_constant_token(self):
        out = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_hand_example(self):
        out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0])

    def test_zero_mean(self, rng):
        out = T.layer_norm(Tensor(rng.normal(size=(4, 16))), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12)
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-9

    def test_gradcheck(self, rng):
        w = rng.normal(size=(2, 8))
        assert_gradcheck(
            lambda x, g, b: T.sum(T.mul(T.layer_norm(x, g, b), w)),
            rng.normal(size=(2, 8)),
            rng.normal(size=8),
            rng.normal(size=8),
        )


class TestElementwise:
    def test_relu(self):
        assert T.relu(Tensor(-0.3)).item() == 0.0
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_subgradient_at_zero(self):
        (g,) = grad_of(lambda x: T.sum(T.relu(x)), np.array([0.0, 1.0]))
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_concat_shape(self):
        assert T.concat([Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3)))], axis=1).shape == (1, 5)

    def test_concat_mismatch(self):
        with pytest.raises(ValueError):
            T.concat([Tensor(np.ones((1, 2))), Tensor(np.ones((2, 3)))], axis=1)

    def test_gelu_reference_values(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-15)

    @pytest.mark.parametrize(
        "fn",
        [
            lambda x, y: T.sum(T.square(T.add(x, y))),
            lambda x, y: T.sum(T.mul(x, y)),
            lambda x, y: T.sum(T.square(x - y)),
            lambda x, y: T.mean(T.gelu(T.mul(x, y))),
            lambda x, y: T.sum(T.square(T.scale(x, 0.7) + y)),
            lambda x, y: T.sum(T.square(T.transpose(T.mul(x, y)))),
            lambda x, y: T.sum(T.square(T.concat([x, y], axis=0))),
            lambda x, y: T.sum(T.square(T.mul(x, y)[1:, ::2])),
            lambda x, y: T.sum(T.square(T.reshape(T.add(x, y), (12,)))),
            lambda x, y: T.sum(T.square(T.mean(T.mul(x, y), axis=0))),
            lambda x, y: T.sum(T.absolute(T.add(x, y))),
        ],
    )
    def test_gradcheck(self, rng, fn):
        assert_gradcheck(fn, rng.normal(size=(3, 4)) + 0.1, rng.normal(size=(3, 4)))

    def test_relu_gradcheck_away_from_kink(self, rng):
        x = rng.normal(size=(4, 5))
        x[np.abs(x) < 0.01] = 0.5
        assert_gradcheck(lambda t: T.sum(T.square(T.relu(t))), x)

    def test_bias_broadcast_gradcheck(self, rng):
        assert_gradcheck(lambda x, b: T.sum(T.square(x + b)), rng.normal(size=(2, 3, 4)), rng.normal(size=4))

    def test_scalar_broadcast(self):
        out = Tensor(np.ones((2, 2))) + 1.5
        np.testing.assert_array_equal(out.data, np.full((2, 2), 2.5))

    def test_arbitrary_broadcast_rejected(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


class TestConv:
    def reference(self, x, w, stride, padding):
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        kh, kw, _, O = w.shape
        Ho = (xp.shape[1] - kh) // stride + 1
        Wo = (xp.shape[2] - kw) // stride + 1
        out = np.zeros((x.shape[0], Ho, Wo, O))
        for b in range(x.shape[0]):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, i * stride : i * stride + kh, j * stride : j * stride + kw, :]
                    out[b, i, j] = np.tensordot(patch, w, axes=3)
        return out

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0), (1, 0)])
    def test_matches_loops(self, rng, stride, padding):
        x = rng.normal(size=(2, 6, 6, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        out = T.conv2d(Tensor(x), Tensor(w), stride, padding).data
        np.testing.assert_allclose(out, self.reference(x, w, stride, padding), atol=1e-12)

    def test_gradcheck(self, rng):
        assert_gradcheck(
            lambda x, w: T.sum(T.square(T.conv2d(x, w, stride=2, padding=1))),
            rng.normal(size=(2, 6, 6, 2)),
            rng.normal(size=(3, 3, 2, 3)),
        )


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        (g,) = grad_of(T.sum, rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_mean_square(self):
        (g,) = grad_of(lambda x: T.mean(T.square(x)), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [1.0, 2.0])

    def test_fan_out_accumulates(self):
        (g,) = grad_of(lambda x: T.sum(T.mul(x, x) + x), np.array([3.0]))
        np.testing.assert_allclose(g, [7.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 2.0)
            with pytest.raises(TapeError):
                tape.backward(y)

    def test_repeated_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.square(x))
            tape.backward(loss)
            with pytest.raises(TapeError):
                tape.backward(loss)
            tape.reset()
            loss = T.sum(T.square(x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * np.ones(3))

    def test_module_backward(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape():
            loss = T.sum(T.scale(x, 3.0))
            T.backward(loss)
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_nothing_recorded_outside_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = T.sum(T.square(x))
        assert y._tape is None
        with pytest.raises(TapeError):
            T.backward(y)

    def test_forward_is_pure(self, rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 4))
        f = lambda: T.softmax(T.gelu(T.matmul(Tensor(x), Tensor(w)))).data
        assert f().tobytes() == f().tobytes()


class TestGradcheckHelpers:
    def test_relative_error(self):
        assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
        assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
        # both tiny: the floor keeps round-off from looking like a failure
        assert relative_error(np.array([1e-12]), np.array([-1e-12])) == pytest.approx(2e-6)

    def test_numerical_gradient_cubic(self):
        x = np.array([0.5, -1.0, 2.0])
        g = numerical_gradient(lambda: float(np.sum(x**3)), x)
        np.testing.assert_allclose(g, 3 * x**2, rtol=1e-9)

    def test_detects_wrong_rule(self):
        x = Tensor(np.array([0.3, 0.7]))

        def bad(a):
            return T._make(a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

        report = check_gradients(lambda: T.sum(bad(x)), {"x": x})
        assert not report.passed
        assert report.worst == "x"

    def test_subset(self, rng):
        x = Tensor(rng.normal(size=(10, 10)))
        report = check_gradients(lambda: T.sum(T.gelu(x)), {"x": x}, max_elements=7, seed=3)
        assert report.passed
