import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rotens.errors import DataError, ShapeError, SizeError, TapeStateError
from rotens.gradcheck import check_gradients
from rotens.nn_ops import relu
from rotens.tensor import (
    Tensor,
    add,
    backward,
    load_tensors,
    maximum,
    mean_all,
    mul,
    no_grad,
    recording_decisions,
    reshape,
    save_tensors,
    scale,
    sum_all,
    tape_length,
    zeros,
)


class TestZeros:
    def test_small(self):
        z = zeros((1, 1, 2, 2))
        assert_array_equal(z.data, [[[[0.0, 0.0], [0.0, 0.0]]]])
        assert not z.requires_grad

    def test_empty_keeps_shape(self):
        z = zeros((0, 3, 4, 4))
        assert z.shape == (0, 3, 4, 4)
        assert z.size == 0

    def test_count_is_product(self):
        assert zeros((1, 2, 3, 3)).size == 18

    def test_overflow(self):
        with pytest.raises(SizeError):
            zeros((2**20, 2**20, 2**20, 1))

    def test_negative_dim(self):
        with pytest.raises(ShapeError):
            zeros((1, -1, 2, 2))


class TestBackward:
    def test_square(self):
        w = Tensor([3.0], requires_grad=True)
        backward(sum_all(mul(w, w)))
        assert_array_equal(w.grad, [6.0])

    def test_relu_mean(self):
        w = Tensor([-1.0, 2.0], requires_grad=True)
        backward(mean_all(relu(w)))
        assert_array_equal(w.grad, [0.0, 0.5])

    def test_tape_cleared(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        backward(sum_all(scale(w, 2.0)))
        assert tape_length() == 0

    def test_twice_without_forward(self):
        w = Tensor([1.0], requires_grad=True)
        loss = sum_all(w * w)
        backward(loss)
        with pytest.raises(TapeStateError):
            backward(loss)

    def test_non_scalar_loss(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(scale(w, 2.0))

    def test_shared_input_accumulates(self):
        w = Tensor([2.0, -1.0], requires_grad=True)
        backward(sum_all(add(mul(w, w), scale(w, 3.0))))
        assert_array_equal(w.grad, 2 * w.data + 3.0)

    def test_no_grad_records_nothing(self):
        w = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = sum_all(w * w)
        assert tape_length() == 0
        assert not out.requires_grad


class TestElementwise:
    def test_maximum(self):
        assert_array_equal(maximum(Tensor([1.0, 5.0]), Tensor([3.0, 2.0])).data, [3.0, 5.0])

    def test_add_identity(self):
        assert_array_equal(add(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).data, [1.0, 2.0])

    def test_scale(self):
        assert_array_equal(scale(Tensor([2.0, 4.0]), 0.5).data, [1.0, 2.0])

    def test_maximum_tie_goes_to_first(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([1.0, 3.0], requires_grad=True)
        backward(sum_all(maximum(a, b)))
        assert_array_equal(a.grad, [1.0, 0.0])
        assert_array_equal(b.grad, [0.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
        with pytest.raises(ShapeError):
            maximum(Tensor(np.zeros((2, 2))), Tensor(np.zeros(4)))

    def test_no_rank_three(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2)))

    def test_reshape_count(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros((2, 3))), (5,))


class TestGradients:
    def test_elementwise_ops(self, rng):
        a = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)), requires_grad=True)
        weights = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)))

        for fn in (
            lambda: sum_all(mul(add(a, b), weights)),
            lambda: sum_all(mul(maximum(a, b), weights)),
            lambda: mean_all(mul(scale(a, -0.7), b)),
            lambda: sum_all(mul(reshape(reshape(a, (2, 48)), (2, 3, 4, 4)), weights)),
        ):
            for result in check_gradients(fn, {"a": a, "b": b}):
                assert result.passed, result

    def test_step_shrinks_near_a_kink(self):
        x = Tensor([1e-6, -0.5, 0.75], requires_grad=True)
        (result,) = check_gradients(lambda: sum_all(relu(x)), {"x": x})
        assert result.passed
        assert result.kinks == 0

    def test_entry_on_a_kink_is_skipped(self):
        x = Tensor([0.0, -0.5, 0.75], requires_grad=True)
        (result,) = check_gradients(lambda: sum_all(relu(x)), {"x": x})
        assert result.passed
        assert result.kinks == 1

    def test_elementwise_error_on_a_quadratic(self):
        x = Tensor([0.5, 1.0, -1.5], requires_grad=True)
        (result,) = check_gradients(lambda: sum_all(mul(x, x)), {"x": x})
        assert result.passed
        assert result.max_elementwise_error < 1e-6

    def test_decisions_are_recorded(self):
        with recording_decisions() as decisions:
            relu(Tensor([1.0, -1.0]))
            maximum(Tensor([1.0]), Tensor([2.0]))
        assert len(decisions) == 2
        relu(Tensor([1.0]))
        assert len(decisions) == 2


class TestCheckpointFile:
    def test_round_trip_is_bitwise(self, tmp_path, rng):
        tensors = {
            "conv.weight": rng.standard_normal((4, 1, 3, 3)),
            "conv.bias": rng.standard_normal(4),
            "fc.weight": rng.standard_normal((2, 4)),
        }
        path = tmp_path / "model.ckpt"
        save_tensors(path, tensors, header="architecture\n")
        header, loaded = load_tensors(path)
        assert header == "architecture\n"
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            assert_array_equal(loaded[name].reshape(value.shape), value)
        assert loaded["conv.bias"].shape == (4, 1, 1, 1)

    def test_starts_with_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_tensors(path, {"w": np.ones(2)})
        assert path.read_bytes().startswith(b"ROTENS1\n")

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_tensors(path, {"w": np.ones((3, 3))})
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(DataError, match="byte offset"):
            load_tensors(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 8)
        with pytest.raises(DataError, match="magic"):
            load_tensors(path)

    def test_values_survive(self, tmp_path):
        path = tmp_path / "model.ckpt"
        value = np.array([np.pi, -0.0, 1e-300, 2.5])
        save_tensors(path, {"v": Tensor(value)})
        _, loaded = load_tensors(path)
        assert_allclose(loaded["v"].reshape(-1), value, rtol=0, atol=0)
