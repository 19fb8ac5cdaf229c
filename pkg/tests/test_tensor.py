import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitsnn import tensor as tn
from bitsnn.tensor import Tape, TapeError, Tensor

from conftest import central_diff, rel_err


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    out[b, oc, i, j] = np.sum(xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k] * w[oc])
    return out


class TestTensorType:
    def test_defaults_to_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_rejects_nan_and_inf(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            Tensor([np.inf])


class TestConv2d:
    def test_all_ones_sum(self):
        out = tn.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
        out = tn.conv2d(x, np.ones((1, 1, 1, 1), dtype=np.float32))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive_loops(self, rng, stride):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        out = tn.conv2d(x, w, stride=stride, padding=1)
        np.testing.assert_allclose(out.data, naive_conv(x, w, stride, 1), atol=1e-6)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(3, 3, 3, 3\)"):
            tn.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 3)))

    def test_empty_output_rejected(self):
        with pytest.raises(ValueError):
            tn.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = tn.conv2d(x, w, padding=1).data
        b = tn.conv2d(x.copy(), w.copy(), padding=1).data
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linear_in_input(self, a, b, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((1, 2, 5, 5)).astype(np.float32)
        y = r.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = r.standard_normal((2, 2, 3, 3)).astype(np.float32)
        lhs = tn.conv2d((a * x + b * y).astype(np.float32), w, padding=1).data
        rhs = a * tn.conv2d(x, w, padding=1).data + b * tn.conv2d(y, w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5 * (1 + np.abs(rhs).max()))


class TestBatchnorm:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = tn.batchnorm(x, np.zeros(3), np.ones(3), np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(out.data, x)

    def test_centered_input_gives_beta(self):
        mu = np.array([0.5, -1.0, 2.0])
        beta = np.array([0.1, 0.2, 0.3])
        x = np.broadcast_to(mu[None, :, None, None], (2, 3, 4, 4)).copy()
        out = tn.batchnorm(x, mu, np.array([1.0, 2.0, 3.0]), np.array([0.7, 1.1, 2.0]), beta)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))

    def test_five_channel_oracle(self, rng):
        x = rng.standard_normal((3, 5, 2, 2))
        mu, gamma, beta = rng.standard_normal((3, 5))
        sigma = rng.uniform(0.5, 2.0, 5)
        out = tn.batchnorm(x, mu, sigma, gamma, beta).data
        ref = np.empty_like(x)
        for c in range(5):
            ref[:, c] = gamma[c] * (x[:, c] - mu[c]) / sigma[c] + beta[c]
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            tn.batchnorm(np.zeros((1, 3, 2, 2)), np.zeros(2), np.ones(3), np.ones(3), np.zeros(3))

    def test_zero_sigma_rejected(self):
        with pytest.raises(ValueError):
            tn.batchnorm(np.zeros((1, 1, 2, 2)), [0.0], [0.0], [1.0], [0.0])

    def test_stabilized_sigma(self):
        assert tn.stabilized_sigma(0.0) == pytest.approx(np.sqrt(1e-5))


class TestSmallOps:
    def test_heaviside_boundary(self):
        out = tn.heaviside(np.array([-1.0, 0.0, 1e-7, 2.0]))
        np.testing.assert_array_equal(out.data, [0, 0, 1, 1])

    def test_avgpool_constant(self):
        x = np.full((1, 2, 4, 4), 0.3, dtype=np.float32)
        np.testing.assert_allclose(tn.avgpool2d(x, 2).data, 0.3)

    def test_avgpool_bad_window(self):
        with pytest.raises(ValueError):
            tn.avgpool2d(np.zeros((1, 1, 5, 5)), 2)

    def test_linear_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(tn.linear(x, np.eye(4)).data, x)

    def test_linear_mismatch(self):
        with pytest.raises(ValueError):
            tn.linear(np.zeros((2, 3)), np.zeros((4, 5)))


class TestBackward:
    def test_without_tape(self):
        loss = tn.tsum(Tensor([1.0, 2.0], requires_grad=True))
        with pytest.raises(TapeError):
            tn.backward(loss)

    def test_non_scalar(self):
        with Tape():
            y = tn.mul(Tensor([1.0, 2.0], requires_grad=True), 2.0)
        with pytest.raises(ValueError):
            tn.backward(y)

    def test_linear_loss_grad_is_x(self, rng):
        x = rng.standard_normal((1, 5))
        w = Tensor(rng.standard_normal((1, 5)), requires_grad=True)
        with Tape():
            loss = tn.tsum(tn.linear(Tensor(x), w))
        tn.backward(loss)
        np.testing.assert_allclose(w.grad, x)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape():
            loss = tn.tsum(tn.add(tn.mul(x, 3.0), x))
        tn.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0, 4.0])

    @pytest.mark.parametrize("seed", range(4))
    def test_conv_grad(self, seed):
        r = np.random.default_rng(seed)
        stride = 1 + seed % 2
        x = r.standard_normal((2, 2, 5, 5))
        w = r.standard_normal((3, 2, 3, 3))
        proj = r.standard_normal(tn.conv2d(x, w, stride, 1).shape)
        f = lambda: float(np.sum(tn.conv2d(x, w, stride, 1).data * proj))
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        with Tape():
            loss = tn.tsum(tn.mul(tn.conv2d(xt, wt, stride, 1), Tensor(proj)))
        tn.backward(loss)
        assert rel_err(xt.grad, central_diff(f, x)) <= 1e-4
        assert rel_err(wt.grad, central_diff(f, w)) <= 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_batchnorm_grad(self, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 3, 3, 3))
        mu, sigma = r.standard_normal(3), r.uniform(0.5, 2, 3)
        gamma, beta = r.standard_normal(3), r.standard_normal(3)
        proj = r.standard_normal(x.shape)
        f = lambda: float(np.sum(tn.batchnorm(x, mu, sigma, gamma, beta).data * proj))
        xt, gt, bt = (Tensor(v, requires_grad=True) for v in (x, gamma, beta))
        with Tape():
            loss = tn.tsum(tn.mul(tn.batchnorm(xt, mu, sigma, gt, bt), Tensor(proj)))
        tn.backward(loss)
        for t, arr in ((xt, x), (gt, gamma), (bt, beta)):
            assert rel_err(t.grad, central_diff(f, arr)) <= 1e-4

    def test_batchnorm_train_grad(self, rng):
        x = rng.standard_normal((4, 2, 3, 3))
        gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
        proj = rng.standard_normal(x.shape)
        f = lambda: float(np.sum(tn.batchnorm_train(x, gamma, beta)[0].data * proj))
        xt, gt = Tensor(x, requires_grad=True), Tensor(gamma, requires_grad=True)
        with Tape():
            loss = tn.tsum(tn.mul(tn.batchnorm_train(xt, gt, beta)[0], Tensor(proj)))
        tn.backward(loss)
        assert rel_err(xt.grad, central_diff(f, x)) <= 1e-4
        assert rel_err(gt.grad, central_diff(f, gamma)) <= 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_linear_grad(self, seed):
        r = np.random.default_rng(seed)
        x, w, b = r.standard_normal((3, 4)), r.standard_normal((2, 4)), r.standard_normal(2)
        labels = r.integers(0, 2, 3)
        f = lambda: float(tn.cross_entropy(tn.linear(x, w, b), labels).data)
        xt, wt, bt = (Tensor(v, requires_grad=True) for v in (x, w, b))
        with Tape():
            loss = tn.cross_entropy(tn.linear(xt, wt, bt), labels)
        tn.backward(loss)
        for t, arr in ((xt, x), (wt, w), (bt, b)):
            assert rel_err(t.grad, central_diff(f, arr)) <= 1e-4

    def test_avgpool_grad(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        proj = rng.standard_normal((1, 2, 2, 2))
        f = lambda: float(np.sum(tn.avgpool2d(x, 2).data * proj))
        xt = Tensor(x, requires_grad=True)
        with Tape():
            loss = tn.tsum(tn.mul(tn.avgpool2d(xt, 2), Tensor(proj)))
        tn.backward(loss)
        assert rel_err(xt.grad, central_diff(f, x)) <= 1e-4
