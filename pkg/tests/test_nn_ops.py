import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rotens.errors import DataError, ShapeError
from rotens.gradcheck import check_gradients
from rotens.nn_ops import (
    ConvParams,
    LinearParams,
    conv2d,
    flatten,
    global_avg_pool,
    linear,
    maxpool2,
    relu,
    softmax,
    softmax_cross_entropy,
)
from rotens.tensor import Tensor, backward, mul, sum_all


def conv_params(rng, out_ch, in_ch, k, stride=1, padding=0) -> ConvParams:
    return ConvParams(
        weight=Tensor(rng.uniform(-1, 1, size=(out_ch, in_ch, k, k)), requires_grad=True),
        bias=Tensor(rng.uniform(-1, 1, size=out_ch), requires_grad=True),
        stride=stride,
        padding=padding,
    )


def naive_conv(x, weight, bias, stride, padding):
    n, c, h, w = x.shape
    out_ch, _, k, _ = weight.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, out_ch, out_h, out_w))
    for b in range(n):
        for o in range(out_ch):
            for i in range(out_h):
                for j in range(out_w):
                    window = padded[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, o, i, j] = (window * weight[o]).sum() + bias[o]
    return out


class TestConv2d:
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 2)])
    def test_matches_naive_loop(self, rng, stride, padding):
        x = rng.uniform(-1, 1, size=(2, 3, 7, 7))
        p = conv_params(rng, 4, 3, 3, stride, padding)
        out = conv2d(Tensor(x), p)
        assert out.shape == (2, 4, p.output_side(7), p.output_side(7))
        assert_allclose(out.data, naive_conv(x, p.weight.data, p.bias.data, stride, padding), rtol=1e-12, atol=1e-12)

    def test_same_padding_keeps_side(self, rng):
        p = conv_params(rng, 2, 1, 5, padding=2)
        assert conv2d(Tensor(rng.uniform(size=(1, 1, 9, 9))), p).shape == (1, 2, 9, 9)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ShapeError):
            ConvParams(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 5, 5))), conv_params(rng, 1, 3, 3))

    def test_gradients(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 2, 6, 6)), requires_grad=True)
        p = conv_params(rng, 3, 2, 3, stride=2, padding=1)
        weights = Tensor(rng.uniform(-1, 1, size=(2, 3, 3, 3)))
        results = check_gradients(
            lambda: sum_all(mul(conv2d(x, p), weights)),
            {"x": x, "weight": p.weight, "bias": p.bias},
        )
        assert all(r.passed for r in results), results


class TestPooling:
    def test_maxpool_values(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        assert_array_equal(maxpool2(Tensor(x)).data, [[[[5.0, 7.0], [13.0, 15.0]]]])

    def test_maxpool_odd_side(self):
        with pytest.raises(ShapeError):
            maxpool2(Tensor(np.zeros((1, 1, 5, 4))))

    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(sum_all(maxpool2(x)))
        assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_global_avg_pool(self, rng):
        x = rng.uniform(size=(2, 3, 4, 4))
        out = global_avg_pool(Tensor(x))
        assert out.shape == (2, 3, 1, 1)
        assert_allclose(out.data[..., 0, 0], x.mean(axis=(2, 3)), rtol=1e-14)

    def test_global_avg_pool_permutation_invariant(self, rng):
        x = rng.uniform(size=(3, 2, 6, 6))
        turned = np.rot90(x, k=1, axes=(2, 3)).copy()
        shuffled = x.reshape(3, 2, 36)[:, :, rng.permutation(36)].reshape(3, 2, 6, 6)
        reference = global_avg_pool(Tensor(x)).data
        assert_array_equal(global_avg_pool(Tensor(turned)).data, reference)
        assert_array_equal(global_avg_pool(Tensor(shuffled)).data, reference)

    def test_gradients(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 2, 4, 4)), requires_grad=True)
        pooled_weights = Tensor(rng.uniform(-1, 1, size=(2, 2, 2, 2)))
        gap_weights = Tensor(rng.uniform(-1, 1, size=(2, 2, 1, 1)))
        for fn in (
            lambda: sum_all(mul(maxpool2(x), pooled_weights)),
            lambda: sum_all(mul(global_avg_pool(x), gap_weights)),
            lambda: sum_all(mul(relu(x), Tensor(np.ones(x.shape)))),
        ):
            assert all(r.passed for r in check_gradients(fn, {"x": x}))


class TestLinearAndLoss:
    def test_linear(self, rng):
        x = rng.uniform(size=(3, 4))
        p = LinearParams(Tensor(rng.uniform(size=(2, 4))), Tensor(rng.uniform(size=2)))
        assert_allclose(linear(Tensor(x), p).data, x @ p.weight.data.T + p.bias.data)

    def test_flatten(self, rng):
        x = rng.uniform(size=(2, 3, 2, 2))
        assert_array_equal(flatten(Tensor(x)).data, x.reshape(2, 12))

    def test_linear_shape_mismatch(self, rng):
        p = LinearParams(Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((3, 5))), p)

    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((4, 10))), [0, 3, 5, 9])
        assert loss.shape == (1, 1, 1, 1)
        assert loss.item() == pytest.approx(math.log(10), rel=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_softmax_is_stable(self):
        p = softmax(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))
        assert np.all(np.isfinite(p))
        assert_allclose(p.sum(axis=1), [1.0, 1.0])

    def test_gradients(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(3, 4)), requires_grad=True)
        p = LinearParams(
            Tensor(rng.uniform(-1, 1, size=(5, 4)), requires_grad=True),
            Tensor(rng.uniform(-1, 1, size=5), requires_grad=True),
        )
        labels = np.array([0, 4, 2])
        results = check_gradients(
            lambda: softmax_cross_entropy(linear(x, p), labels),
            {"x": x, "weight": p.weight, "bias": p.bias},
        )
        assert all(r.passed for r in results), results
