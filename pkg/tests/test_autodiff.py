"""Unit tests for the tape-based autodiff core.

Gradients are verified against central finite differences computed by
re-evaluating the recorded forward expression at perturbed inputs (the
analytic path never sees the perturbations). Hand-derived values are frozen
inline.
"""

import numpy as np
import pytest

from deepsep.autodiff import (
    AdamState,
    Graph,
    Tensor,
    adam_step,
    add,
    backward,
    concat_channels,
    conv1d_same,
    elementwise_mul,
    elementwise_sub_abs,
    mse_loss,
    multi_conv1d_same,
    relu,
    sigmoid,
)

RNG = np.random.default_rng(20240901)


def numeric_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f with respect to array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build, tensors, rtol=1e-6, atol=1e-9):
    """Compare backward() grads of scalar build(tensors) against finite differences."""
    for t in tensors:
        t.grad = None
    with Graph():
        loss = build()
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    for t, a in zip(tensors, analytic):
        num = numeric_grad(lambda: build().item(), t.data)
        np.testing.assert_allclose(a, num, rtol=rtol, atol=atol)


class TestConv1dSame:
    def test_hand_convolution(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
        w = Tensor(np.array([[[1.0, 1.0, 1.0]]]))
        b = Tensor(np.zeros(1))
        out = conv1d_same(x, w, b)
        np.testing.assert_allclose(out.data, [[[3.0, 6.0, 5.0]]])

    def test_identity_kernel(self):
        x = Tensor(np.array([[[5.0, -2.0, 7.0]]]))
        w = Tensor(np.array([[[0.0, 1.0, 0.0]]]))
        b = Tensor(np.zeros(1))
        out = conv1d_same(x, w, b)
        np.testing.assert_allclose(out.data, x.data)

    @pytest.mark.parametrize("length", [1, 7, 64, 512, 1000])
    def test_length_preserved(self, length):
        x = Tensor(RNG.standard_normal((2, 3, length)))
        w = Tensor(RNG.standard_normal((4, 3, 5)))
        b = Tensor(RNG.standard_normal(4))
        assert conv1d_same(x, w, b).shape == (2, 4, length)

    def test_even_kernel_rejected(self):
        x = Tensor(np.zeros((1, 1, 8)))
        with pytest.raises(ValueError, match="odd"):
            conv1d_same(x, Tensor(np.zeros((1, 1, 4))), Tensor(np.zeros(1)))

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 2, 8)))
        with pytest.raises(ValueError, match="channel"):
            conv1d_same(x, Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros(1)))

    def test_linearity(self):
        x = RNG.standard_normal((2, 2, 33))
        y = RNG.standard_normal((2, 2, 33))
        w = Tensor(RNG.standard_normal((3, 2, 11)))
        zb = Tensor(np.zeros(3))
        alpha, beta = 1.7, -0.4
        lhs = conv1d_same(Tensor(alpha * x + beta * y), w, zb).data
        rhs = alpha * conv1d_same(Tensor(x), w, zb).data + beta * conv1d_same(Tensor(y), w, zb).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_matches_naive_correlation(self):
        # brute-force cross-correlation with explicit zero padding
        x = RNG.standard_normal((3, 4, 21))
        w = RNG.standard_normal((5, 4, 7))
        b = RNG.standard_normal(5)
        pad = 3
        xp = np.zeros((3, 4, 21 + 2 * pad))
        xp[:, :, pad:pad + 21] = x
        want = np.zeros((3, 5, 21))
        for bb in range(3):
            for o in range(5):
                for l in range(21):
                    want[bb, o, l] = np.sum(w[o] * xp[bb, :, l:l + 7]) + b[o]
        got = conv1d_same(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_gradients(self):
        x = Tensor(RNG.standard_normal((2, 3, 9)), requires_grad=True)
        w = Tensor(RNG.standard_normal((2, 3, 5)), requires_grad=True)
        b = Tensor(RNG.standard_normal(2), requires_grad=True)
        tgt = Tensor(RNG.standard_normal((2, 2, 9)))
        check_grads(lambda: mse_loss(conv1d_same(x, w, b), tgt), [x, w, b])


class TestMultiConv:
    def test_matches_composed_route(self):
        x = Tensor(RNG.standard_normal((2, 3, 17)))
        ws = [Tensor(RNG.standard_normal((2, 3, k))) for k in (3, 5, 11, 15)]
        bs = [Tensor(RNG.standard_normal(2)) for _ in range(4)]
        fused = multi_conv1d_same(x, ws, bs).data
        composed = concat_channels([conv1d_same(x, w, b) for w, b in zip(ws, bs)]).data
        np.testing.assert_allclose(fused, composed, atol=1e-12)

    def test_gradients(self):
        x = Tensor(RNG.standard_normal((1, 2, 8)), requires_grad=True)
        ws = [Tensor(RNG.standard_normal((2, 2, k)), requires_grad=True) for k in (3, 5)]
        bs = [Tensor(RNG.standard_normal(2), requires_grad=True) for _ in range(2)]
        tgt = Tensor(RNG.standard_normal((1, 4, 8)))
        check_grads(lambda: mse_loss(multi_conv1d_same(x, ws, bs), tgt), [x, *ws, *bs])


class TestConcat:
    def test_order_and_blocks(self):
        a = Tensor(RNG.standard_normal((2, 2, 5)))
        b = Tensor(RNG.standard_normal((2, 3, 5)))
        out = concat_channels([a, b])
        assert out.shape == (2, 5, 5)
        np.testing.assert_array_equal(out.data[:, :2], a.data)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)

    def test_single_input_passthrough(self):
        a = Tensor(RNG.standard_normal((1, 2, 4)))
        assert concat_channels([a]) is a

    def test_mismatch_rejected(self):
        a = Tensor(np.zeros((2, 2, 5)))
        b = Tensor(np.zeros((2, 2, 6)))
        with pytest.raises(ValueError):
            concat_channels([a, b])

    def test_gradient_splits_exactly(self):
        a = Tensor(RNG.standard_normal((2, 2, 6)), requires_grad=True)
        b = Tensor(RNG.standard_normal((2, 1, 6)), requires_grad=True)
        tgt = Tensor(RNG.standard_normal((2, 3, 6)))
        check_grads(lambda: mse_loss(concat_channels([a, b]), tgt), [a, b])


class TestElementwise:
    def test_sigmoid_zero(self):
        assert sigmoid(Tensor(np.zeros(3))).data[0] == 0.5

    def test_sigmoid_range(self):
        v = sigmoid(Tensor(RNG.standard_normal(1000) * 5)).data
        assert np.all(v > 0) and np.all(v < 1)

    def test_sigmoid_derivative_at_zero(self):
        x = Tensor(np.zeros(1), requires_grad=True)
        with Graph():
            loss = mse_loss(sigmoid(x), Tensor(np.zeros(1)))
        backward(loss)
        # d/dx mean((sigmoid(x) - 0)^2) = 2*0.5*0.25 = 0.25
        num = numeric_grad(lambda: float(np.mean((1 / (1 + np.exp(-x.data))) ** 2)), x.data, h=1e-6)
        assert abs(x.grad[0] - 0.25) < 1e-12
        np.testing.assert_allclose(x.grad, num, atol=1e-8)

    def test_gate_values(self):
        v = Tensor(np.array([0.25]))
        assert elementwise_sub_abs(0, v).data[0] == 0.25
        assert elementwise_sub_abs(1, v).data[0] == 0.75

    def test_gate_stays_in_unit_interval(self):
        v = Tensor(RNG.uniform(1e-6, 1 - 1e-6, size=500))
        for c in (0, 1):
            g = elementwise_sub_abs(c, v).data
            assert np.all(g > 0) and np.all(g < 1)

    def test_gate_bad_constant_rejected(self):
        with pytest.raises(ValueError):
            elementwise_sub_abs(0.5, Tensor(np.zeros(2)))

    def test_mul_and_add_shape_checks(self):
        a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            elementwise_mul(a, b)
        with pytest.raises(ValueError):
            add(a, b)

    def test_elementwise_gradients(self):
        a = Tensor(RNG.standard_normal((2, 4)), requires_grad=True)
        b = Tensor(RNG.standard_normal((2, 4)), requires_grad=True)
        tgt = Tensor(RNG.standard_normal((2, 4)))
        check_grads(lambda: mse_loss(elementwise_mul(a, b), tgt), [a, b])
        check_grads(lambda: mse_loss(add(a, b), tgt), [a, b])
        check_grads(lambda: mse_loss(relu(a), tgt), [a])
        v = Tensor(RNG.uniform(0.05, 0.95, (3, 5)), requires_grad=True)
        t2 = Tensor(RNG.standard_normal((3, 5)))
        check_grads(lambda: mse_loss(elementwise_sub_abs(1, v), t2), [v])


class TestMseLoss:
    def test_identical_is_zero(self):
        a = RNG.standard_normal(16)
        assert mse_loss(Tensor(a), Tensor(a.copy())).item() == 0.0

    def test_hand_value(self):
        out = mse_loss(Tensor(np.array([1.0, 1.0])), Tensor(np.array([0.0, 2.0])))
        assert out.item() == 1.0

    def test_gradient_formula(self):
        pred = Tensor(RNG.standard_normal(8), requires_grad=True)
        target = Tensor(RNG.standard_normal(8))
        with Graph():
            loss = mse_loss(pred, target)
        backward(loss)
        np.testing.assert_allclose(pred.grad, 2 * (pred.data - target.data) / 8, atol=1e-15)
        num = numeric_grad(lambda: float(np.mean((pred.data - target.data) ** 2)), pred.data)
        np.testing.assert_allclose(pred.grad, num, atol=1e-6)


class TestBackwardSemantics:
    def test_scalar_w_hand_gradient(self):
        # loss = mse(w*x, y) with scalars: grad_w = 2x(wx - y)
        w = Tensor(np.array([1.5]), requires_grad=True)
        x = Tensor(np.array([2.0]))
        y = Tensor(np.array([5.0]))
        with Graph():
            loss = mse_loss(elementwise_mul(w, x), y)
        backward(loss)
        assert abs(w.grad[0] - 2 * 2.0 * (1.5 * 2.0 - 5.0)) < 1e-12

    def test_constant_loss_zero_grads(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        with Graph():
            loss = mse_loss(elementwise_mul(w, Tensor(np.zeros(1))), Tensor(np.zeros(1)))
        backward(loss)
        assert w.grad[0] == 0.0

    def test_fanout_accumulates(self):
        # loss = mean((a + a)^2) -> grad = 8a/n; each branch contributes half
        a = Tensor(RNG.standard_normal(6), requires_grad=True)
        with Graph():
            loss = mse_loss(add(a, a), Tensor(np.zeros(6)))
        backward(loss)
        np.testing.assert_allclose(a.grad, 8 * a.data / 6, atol=1e-14)

    def test_non_scalar_loss_rejected(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        with Graph():
            out = add(a, a)
        with pytest.raises(ValueError, match="scalar"):
            backward(out)

    def test_unrecorded_loss_rejected(self):
        loss = mse_loss(Tensor(np.ones(2), requires_grad=True), Tensor(np.zeros(2)))
        with pytest.raises(RuntimeError, match="not recorded"):
            backward(loss)

    def test_double_backward_rejected(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with Graph():
            loss = mse_loss(a, Tensor(np.zeros(2)))
        backward(loss)
        with pytest.raises(RuntimeError, match="already ran"):
            backward(loss)

    def test_recording_after_backward_rejected(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with Graph() as g:
            loss = mse_loss(a, Tensor(np.zeros(2)))
            backward(loss)
            with pytest.raises(RuntimeError, match="consumed"):
                mse_loss(a, Tensor(np.zeros(2)))
        del g

    def test_nested_graph_rejected(self):
        with Graph():
            with pytest.raises(RuntimeError, match="already recording"):
                with Graph():
                    pass

    def test_no_recording_without_graph(self):
        a = Tensor(np.ones(2), requires_grad=True)
        out = mse_loss(a, Tensor(np.zeros(2)))
        assert out.node_id is None and out.graph is None


class TestAdam:
    def test_first_step_moves_by_lr(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        w.grad = np.array([1.0])
        st = AdamState([w], lr=0.1)
        adam_step([w], st)
        assert st.t == 1
        assert abs(w.data[0] - (-0.1)) < 1e-8
        assert w.grad is None

    def test_zero_grad_leaves_param(self):
        w = Tensor(np.array([2.5]), requires_grad=True)
        w.grad = np.zeros(1)
        st = AdamState([w])
        adam_step([w], st)
        assert w.data[0] == 2.5
        assert st.t == 1

    def test_missing_grad_rejected(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        st = AdamState([w])
        with pytest.raises(ValueError, match="gradient"):
            adam_step([w], st)

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(7)
            w = Tensor(rng.standard_normal(5), requires_grad=True)
            st = AdamState([w], lr=1e-2)
            for _ in range(25):
                with Graph():
                    loss = mse_loss(elementwise_mul(w, w), Tensor(np.ones(5)))
                backward(loss)
                adam_step([w], st)
            return w.data.copy()

        a, b = run(), run()
        np.testing.assert_array_equal(a, b)
