import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rotens.ensemble import feature_max, feature_mean
from rotens.errors import DataError, ShapeError
from rotens.geometry import C4, QuarterTurn, rot90_array
from rotens.gradcheck import check_gradients
from rotens.model import (
    Conv2d,
    Flatten,
    GlobalAvgPool,
    InferenceMode,
    Linear,
    Mode,
    ModelGraph,
    SMALL_CNN_HEAD_START,
    ReLU,
    build_default,
    forward_branches,
    forward_ours,
    forward_plain,
    forward_tta,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from rotens.nn_ops import softmax_cross_entropy
from rotens.tensor import Tensor, no_grad, tape_length


@pytest.fixture(scope="module")
def default_model():
    return build_default(seed=3)


@pytest.fixture(scope="module")
def inputs():
    return np.random.default_rng(99).uniform(-1, 1, size=(20, 1, 28, 28))


class TestBuildDefault:
    def test_shapes(self, default_model):
        assert default_model.split_shape == (16, 7, 7)
        assert default_model.classes == 10
        assert forward_plain(default_model, Tensor(np.zeros((2, 1, 28, 28)))).shape == (2, 10)

    def test_xavier_limits(self, default_model):
        first = default_model.layers[0].params.weight.data
        limit = np.sqrt(6.0 / (1 * 9 + 8 * 9))
        assert np.abs(first).max() <= limit
        assert np.all(default_model.layers[0].params.bias.data == 0.0)

    def test_seeded(self):
        a, b = build_default(seed=5), build_default(seed=5)
        for name, tensor in a.parameters().items():
            assert_array_equal(tensor.data, b.parameters()[name].data)

    def test_parameter_count(self, default_model):
        # conv weights plus biases for widths 8, 8, 16, 16, then a 16 -> 10 linear layer
        table = [1 * 8 * 9 + 8, 8 * 8 * 9 + 8, 8 * 16 * 9 + 16, 16 * 16 * 9 + 16, 16 * 10 + 10]
        assert default_model.num_parameters() == sum(table) == 4322
        assert default_model.head_start == default_model.split_index == SMALL_CNN_HEAD_START

    def test_forward_plain_chains_layers(self, tiny_model):
        x = np.random.default_rng(2).uniform(-1, 1, size=(3, 1, 8, 8))
        with no_grad():
            out = Tensor(x)
            for layer in tiny_model.layers:
                out = layer(out)
            assert_array_equal(forward_plain(tiny_model, Tensor(x)).data, out.data)

    def test_side_must_divide_by_four(self):
        with pytest.raises(ShapeError):
            build_default(input_shape=(1, 30, 30))

    def test_split_index(self):
        m = build_default(input_shape=(1, 8, 8), split_index=5, widths=(2, 2, 3, 3))
        assert m.split_shape == (2, 4, 4)

    def test_wrong_input_shape(self, default_model):
        with pytest.raises(ShapeError):
            forward_plain(default_model, Tensor(np.zeros((1, 1, 8, 8))))


class TestGraphValidation:
    def test_non_square_split_map(self):
        layers = [Conv2d(1, 2, 3), GlobalAvgPool(), Flatten(), Linear(2, 2)]
        with pytest.raises(ShapeError):
            ModelGraph(layers, split_index=1, head_start=1, input_shape=(1, 4, 6))

    def test_bad_split_order(self):
        layers = [Conv2d(1, 2, 3), GlobalAvgPool(), Flatten(), Linear(2, 2)]
        with pytest.raises(ShapeError):
            ModelGraph(layers, split_index=2, head_start=1, input_shape=(1, 4, 4))

    def test_head_without_gap_warns(self, caplog):
        layers = [Conv2d(1, 2, 3), ReLU(), Flatten(), Linear(32, 3)]
        m = ModelGraph(layers, split_index=2, head_start=2, input_shape=(1, 4, 4))
        assert m.warnings
        assert "global average pool" in caplog.text

    def test_spatial_conv_in_tail_warns(self, caplog):
        m = build_default(input_shape=(1, 8, 8), split_index=5, widths=(2, 2, 3, 3))
        assert len(m.warnings) == 1
        assert "layer 5" in m.warnings[0]
        assert "not rotation-equivariant" in caplog.text
        assert build_default(input_shape=(1, 8, 8), widths=(2, 2, 3, 3)).warnings == []

    def test_description_round_trip(self, tiny_model):
        rebuilt = ModelGraph.from_description(tiny_model.describe())
        assert rebuilt.describe() == tiny_model.describe()
        assert rebuilt.num_parameters() == tiny_model.num_parameters()


class TestInvariance:
    def test_ours_max_is_bitwise_invariant(self, default_model, inputs):
        mode = InferenceMode(Mode.OURS_MAX)
        with no_grad():
            reference = forward_ours(default_model, Tensor(inputs), mode).data
            for t in C4:
                turned = forward_ours(default_model, Tensor(rot90_array(inputs, t)), mode).data
                assert_array_equal(turned, reference)

    def test_ours_mean_is_invariant(self, default_model, inputs):
        mode = InferenceMode(Mode.OURS_MEAN)
        with no_grad():
            reference = forward_ours(default_model, Tensor(inputs), mode).data
            for t in C4:
                turned = forward_ours(default_model, Tensor(rot90_array(inputs, t)), mode).data
                assert np.abs(turned - reference).max() <= 1e-9 * np.abs(reference).max()

    def test_plain_is_not_invariant(self, default_model, inputs):
        with no_grad():
            reference = forward_plain(default_model, Tensor(inputs)).data
            turned = forward_plain(default_model, Tensor(rot90_array(inputs, QuarterTurn.R90))).data
        assert not np.array_equal(turned, reference)

    def test_equivariance(self, default_model, inputs):
        with no_grad():
            Z = forward_branches(default_model, Tensor(inputs))
            for t in C4:
                Z_turned = forward_branches(default_model, Tensor(rot90_array(inputs, t)))
                assert_array_equal(feature_max(Z_turned).data, rot90_array(feature_max(Z).data, t))
                assert_allclose(
                    feature_mean(Z_turned).data, rot90_array(feature_mean(Z).data, t), rtol=1e-12, atol=1e-300
                )

    def test_branches_are_closed_under_quarter_turns(self, tiny_model):
        x = np.random.default_rng(5).uniform(-1, 1, size=(3, 1, 8, 8))
        with no_grad():
            Z = forward_branches(tiny_model, Tensor(x))
            for a in C4:
                Z_turned = forward_branches(tiny_model, Tensor(rot90_array(x, a)))
                for n, t in enumerate(C4):
                    m = C4.index(t.compose(a))
                    assert_array_equal(Z_turned[n].data, rot90_array(Z[m].data, a))

    def test_single_branch_matches_plain(self, default_model, inputs):
        mode = InferenceMode(Mode.OURS_MAX, (QuarterTurn.R0,))
        with no_grad():
            assert_array_equal(
                forward_ours(default_model, Tensor(inputs), mode).data,
                forward_plain(default_model, Tensor(inputs)).data,
            )

    def test_tta_scores(self, default_model, inputs):
        x = Tensor(inputs[:5])
        mean = forward_tta(default_model, x, InferenceMode(Mode.TTA_MEAN))
        maximum = forward_tta(default_model, x, InferenceMode(Mode.TTA_MAX))
        assert mean.shape == (5, 10)
        assert_allclose(mean.sum(axis=1), np.ones(5), rtol=1e-12)
        assert np.all(maximum >= mean)

    def test_mode_guards(self, default_model):
        x = Tensor(np.zeros((1, 1, 28, 28)))
        with pytest.raises(ValueError):
            forward_ours(default_model, x, InferenceMode(Mode.TTA_MAX))
        with pytest.raises(ValueError):
            forward_tta(default_model, x, InferenceMode(Mode.OURS_MAX))
        with pytest.raises(ValueError):
            InferenceMode.parse("ours_median")

    def test_predict_leaves_no_tape(self, tiny_model):
        predict(tiny_model, Tensor(np.ones((2, 1, 8, 8))), InferenceMode(Mode.OURS_MEAN))
        assert tape_length() == 0


class TestGradients:
    @pytest.mark.parametrize("mode", [Mode.OURS_MAX, Mode.OURS_MEAN])
    def test_forward_ours(self, tiny_model, mode):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-1, 1, size=(2, 1, 8, 8)), requires_grad=True)
        labels = np.array([1, 2])
        inference = InferenceMode(mode)
        results = check_gradients(
            lambda: softmax_cross_entropy(forward_ours(tiny_model, x, inference), labels),
            {"input": x, **tiny_model.parameters()},
        )
        assert all(r.passed for r in results), [r for r in results if not r.passed]


class TestCheckpoint:
    def test_rebuild_from_checkpoint(self, tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_model, path)
        loaded = load_checkpoint(path)
        x = Tensor(np.random.default_rng(1).uniform(size=(3, 1, 8, 8)))
        mode = InferenceMode(Mode.OURS_MAX)
        assert_array_equal(predict(loaded, x, mode), predict(tiny_model, x, mode))
        assert loaded.split_index == tiny_model.split_index

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_state_dict_mismatch(self, tiny_model):
        with pytest.raises(DataError):
            tiny_model.load_state_dict({})
