import numpy as np
import pytest

import selab.tensor as T


def randt(rng, *shape, grad=True):
    return T.Tensor(rng.normal(size=shape), requires_grad=grad, dtype=np.float64)


class TestBasics:
    def test_square_gradient(self):
        x = T.Tensor([3.0], requires_grad=True, dtype=np.float64)
        T.backward(T.sum_(T.mul(x, x)))
        assert np.allclose(x.grad, [6.0])

    def test_constant_loss_zero_grads(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        loss = T.sum_(T.mul(x, 0.0))
        T.backward(loss)
        assert np.allclose(x.grad, 0.0)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(a))
        assert np.allclose(out.data, a)

    def test_sigmoid_symmetry_point(self):
        assert T.sigmoid(T.Tensor([0.0])).data[0] == pytest.approx(0.5)

    def test_shape_error_names_op(self):
        with pytest.raises(T.ShapeError, match="add"):
            T.add(T.Tensor([1.0]), T.Tensor([1.0, 2.0]))
        with pytest.raises(T.ShapeError, match="matmul"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        with pytest.raises(T.TapeError, match="scalar"):
            T.backward(y)

    def test_detached_loss_rejected(self):
        x = T.Tensor([1.0], requires_grad=True)
        with pytest.raises(T.TapeError, match="detached"):
            T.backward(x)
        y = T.sum_(T.mul(x, x))
        T.backward(y)  # consumes the tape
        with pytest.raises(T.TapeError, match="detached"):
            T.backward(y)

    def test_no_grad_blocks_recording(self):
        x = T.Tensor([2.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad

    def test_backward_deterministic(self):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(4, 4))
        grads = []
        for _ in range(2):
            x = T.Tensor(data, requires_grad=True, dtype=np.float64)
            w = T.Tensor(np.linspace(-1, 1, 16).reshape(4, 4), requires_grad=True,
                         dtype=np.float64)
            loss = T.sum_(T.tanh(T.matmul(x, w)))
            T.backward(loss)
            grads.append((x.grad.copy(), w.grad.copy()))
        assert np.array_equal(grads[0][0], grads[1][0])
        assert np.array_equal(grads[0][1], grads[1][1])


class TestConv:
    def test_conv2d_matches_direct_loops(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 1, 8, 8))
        w = rng.normal(size=(1, 1, 3, 3))
        out = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64),
                       stride_f=1, pad_f=0)
        # direct 4-nested-loop oracle with the same left-only time padding
        xp = np.pad(x, ((0, 0), (0, 0), (2, 0), (0, 0)))
        expect = np.zeros((1, 1, 8, 6))
        for t in range(8):
            for f in range(6):
                for i in range(3):
                    for j in range(3):
                        expect[0, 0, t, f] += xp[0, 0, t + i, f + j] * w[0, 0, i, j]
        assert np.max(np.abs(out.data - expect)) < 1e-6

    def test_conv2d_causal_in_time(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 10, 5))
        w = T.Tensor(rng.normal(size=(3, 2, 2, 3)), dtype=np.float64)
        base = T.conv2d(T.Tensor(x, dtype=np.float64), w, stride_f=2, pad_f=1).data
        x2 = x.copy()
        x2[:, :, 6:, :] = rng.normal(size=x2[:, :, 6:, :].shape) * 100
        pert = T.conv2d(T.Tensor(x2, dtype=np.float64), w, stride_f=2, pad_f=1).data
        assert np.array_equal(base[:, :, :6, :], pert[:, :, :6, :])

    def test_transposed_conv_is_adjoint(self):
        rng = np.random.default_rng(4)
        for sf, pf, kf in [(1, 0, 3), (2, 1, 3), (2, 1, 5)]:
            F = 9
            Fo = (F + 2 * pf - kf) // sf + 1
            x = T.Tensor(rng.normal(size=(2, 3, 5, F)), dtype=np.float64)
            w = T.Tensor(rng.normal(size=(4, 3, 2, kf)), dtype=np.float64)
            y = T.Tensor(rng.normal(size=(2, 4, 5, Fo)), dtype=np.float64)
            lhs = float(np.sum(T.conv2d(x, w, stride_f=sf, pad_f=pf).data * y.data))
            rhs = float(np.sum(x.data * T.conv_transpose2d(
                y, w, stride_f=sf, pad_f=pf, causal=False).data))
            assert abs(lhs - rhs) < 1e-5

    def test_transposed_conv_causal_mode(self):
        rng = np.random.default_rng(5)
        y = rng.normal(size=(1, 3, 8, 5))
        w = T.Tensor(rng.normal(size=(3, 2, 2, 3)), dtype=np.float64)
        base = T.conv_transpose2d(T.Tensor(y, dtype=np.float64), w,
                                  stride_f=2, pad_f=1, causal=True).data
        y2 = y.copy()
        y2[:, :, 5:, :] = 7.0
        pert = T.conv_transpose2d(T.Tensor(y2, dtype=np.float64), w,
                                  stride_f=2, pad_f=1, causal=True).data
        assert np.array_equal(base[:, :, :5, :], pert[:, :, :5, :])


class TestAdam:
    def test_zero_grad_first_step_keeps_params(self):
        p = T.Tensor([1.0, -2.0], requires_grad=True)
        p.grad = np.zeros(2, dtype=np.float32)
        T.adam_step({"p": p}, T.AdamState())
        assert np.allclose(p.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        # hand-evaluated recurrence at t=1: m^=g, v^=g^2, delta = lr*g/(|g|+eps)
        p = T.Tensor([0.0], requires_grad=True, dtype=np.float64)
        p.grad = np.ones(1)
        T.adam_step({"p": p}, T.AdamState(lr=0.001))
        assert p.data[0] == pytest.approx(-0.001, rel=1e-6)

    def test_converges_on_quadratic(self):
        p = T.Tensor([0.0], requires_grad=True, dtype=np.float64)
        st = T.AdamState(lr=0.1)
        for _ in range(100):
            p.grad = 2.0 * (p.data - 2.0)
            T.adam_step({"p": p}, st)
        assert abs(p.data[0] - 2.0) < 0.1

    def test_missing_grad_raises(self):
        p = T.Tensor([0.0], requires_grad=True)
        with pytest.raises(ValueError, match="no gradient"):
            T.adam_step({"p": p}, T.AdamState())

    def test_grads_cleared_and_step_counts(self):
        p = T.Tensor([0.0], requires_grad=True, dtype=np.float64)
        st = T.AdamState()
        p.grad = np.ones(1)
        T.adam_step({"p": p}, st)
        assert p.grad is None
        assert st.step == 1

    def test_matches_scalar_recurrence(self):
        # independent scalar recurrence as oracle
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        w, m, v = 0.5, 0.0, 0.0
        p = T.Tensor([0.5], requires_grad=True, dtype=np.float64)
        st = T.AdamState(lr=lr)
        rng = np.random.default_rng(6)
        for t in range(1, 20):
            g = float(rng.normal())
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            p.grad = np.array([g])
            T.adam_step({"p": p}, st)
        assert p.data[0] == pytest.approx(w, abs=1e-12)


class TestClip:
    def test_clip_grad_norm_scales(self):
        p = T.Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)
        p.grad = np.full(4, 10.0)
        norm = T.clip_grad_norm([p], 5.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(p.grad) == pytest.approx(5.0)

    def test_clip_grad_norm_leaves_small(self):
        p = T.Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)
        p.grad = np.full(4, 0.1)
        T.clip_grad_norm([p], 5.0)
        assert np.allclose(p.grad, 0.1)


class TestGradcheckOps:
    """Per-op finite differences; the exhaustive sweep lives in gradcheck.py."""

    @pytest.mark.parametrize("name", ["elu", "softmax", "duplicate", "irdft", "scale"])
    def test_op(self, name):
        rng = np.random.default_rng(7)
        if name == "elu":
            x = randt(rng, 4, 4)
            m = randt(rng, 4, 4, grad=False)
            err = T.check_gradient(lambda: T.sum_(T.mul(T.elu(x), m)), [x])
        elif name == "softmax":
            x = randt(rng, 3, 5)
            m = randt(rng, 3, 5, grad=False)
            err = T.check_gradient(lambda: T.sum_(T.mul(T.softmax(x, -1), m)), [x])
        elif name == "duplicate":
            x = randt(rng, 2, 3)
            m = randt(rng, 2, 6, grad=False)
            err = T.check_gradient(lambda: T.sum_(T.mul(T.duplicate(x, -1), m)), [x])
        elif name == "irdft":
            re, im = randt(rng, 2, 5), randt(rng, 2, 5)
            m = randt(rng, 2, 8, grad=False)
            err = T.check_gradient(lambda: T.sum_(T.mul(T.irdft(re, im, 8), m)), [re, im])
        else:
            x, s = randt(rng, 3, 4), randt(rng, 1)
            m = randt(rng, 3, 4, grad=False)
            err = T.check_gradient(lambda: T.sum_(T.mul(T.scale(x, s), m)), [x, s])
        assert err < 1e-5

    def test_duplicate_semantics(self):
        out = T.duplicate(T.Tensor([[1.0, 2.0]]), axis=-1)
        assert np.allclose(out.data, [[1.0, 1.0, 2.0, 2.0]])
