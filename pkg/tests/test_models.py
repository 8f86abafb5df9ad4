import math

import numpy as np
import pytest

from masked_dpsgd.domain import Dataset
from masked_dpsgd.models import (
    LayerSpec,
    ModelError,
    Network,
    QuadraticModel,
    accuracy,
    build_model,
    finite_diff_grad,
    init_params,
    max_relative_error,
    per_sample_grads,
    per_sample_loss,
)


def _random_point(model: Network, rng: np.random.Generator, scale: float = 0.5) -> tuple[np.ndarray, np.ndarray, int]:
    params = scale * rng.standard_normal(model.param_count)
    features = rng.standard_normal(model.feature_count)
    label = int(rng.integers(0, model.classes))
    return params, features, label


def test_zero_weights_give_uniform_softmax_loss() -> None:
    model = build_model("logreg", (3,), 10)
    assert per_sample_loss(model, np.zeros(model.param_count), [0.3, -1.0, 2.0], 4) == pytest.approx(math.log(10), rel=1e-12)
    binary = build_model("logreg", (5,), 2)
    assert per_sample_loss(binary, np.zeros(binary.param_count), np.ones(5), 0) == pytest.approx(math.log(2), rel=1e-12)


def test_hand_computed_two_layer_network() -> None:
    model = build_model("mlp", (2,), 2, hidden=2)
    # W1, b1, W2, b2 in layer order
    params = np.array([1.0, 0.0, 0.0, -1.0, 0.0, 0.5, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    assert model.param_count == params.size
    assert per_sample_loss(model, params, [1.0, 2.0], 1) == pytest.approx(math.log1p(math.exp(2.0)), rel=1e-12)


def test_quadratic_gradient_equals_params_at_origin_sample() -> None:
    model = QuadraticModel(3)
    params = np.array([0.5, -2.0, 3.0])
    grads = per_sample_grads(model, params, np.zeros((2, 3)), np.zeros(2, dtype=np.int64))
    assert np.array_equal(grads, np.stack([params, params]))


@pytest.mark.parametrize("h", [0.5, 0.25])
def test_finite_difference_is_exact_on_quadratic(h: float) -> None:
    model = QuadraticModel(2)
    params = np.array([1.0, 2.0])
    assert finite_diff_grad(model, params, [0.0, 0.0], 0, h).tolist() == [1.0, 2.0]


def test_finite_difference_rejects_non_positive_step() -> None:
    with pytest.raises(ModelError):
        finite_diff_grad(QuadraticModel(2), np.zeros(2), [0.0, 0.0], 0, 0.0)


def test_logreg_gradients_match_finite_differences() -> None:
    model = build_model("logreg", (5,), 3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        params, features, label = _random_point(model, rng)
        analytic = per_sample_grads(model, params, features[None, :], [label])[0]
        numeric = finite_diff_grad(model, params, features, label, 1e-5)
        assert max_relative_error(analytic, numeric) <= 1e-4


def test_mlp_gradients_match_finite_differences() -> None:
    model = build_model("mlp", (4,), 3, hidden=5)
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 100:
        params, features, label = _random_point(model, rng)
        w1, b1 = model.unflatten(params)[0]
        if np.min(np.abs(w1 @ features + b1)) < 1e-3:
            # too close to a relu kink for a central difference
            continue
        analytic = per_sample_grads(model, params, features[None, :], [label])[0]
        numeric = finite_diff_grad(model, params, features, label, 1e-5)
        assert max_relative_error(analytic, numeric) <= 1e-4
        checked += 1


def test_central_difference_error_shrinks_quadratically() -> None:
    model = build_model("logreg", (4,), 3)
    rng = np.random.default_rng(2)
    params, features, label = _random_point(model, rng, scale=1.0)
    analytic = per_sample_grads(model, params, features[None, :], [label])[0]
    coarse = np.linalg.norm(finite_diff_grad(model, params, features, label, 1e-2) - analytic)
    fine = np.linalg.norm(finite_diff_grad(model, params, features, label, 5e-3) - analytic)
    assert 3.0 <= coarse / fine <= 5.0


@pytest.mark.parametrize(
    "specs",
    [
        (
            LayerSpec("conv", units=2, kernel=3, stride=1, padding=1),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=2, stride=1),
            LayerSpec("flatten"),
            LayerSpec("dense", units=3),
        ),
        (
            LayerSpec("conv", units=3, kernel=3, stride=2, padding=1),
            LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("flatten"),
            LayerSpec("dense", units=3),
        ),
    ],
)
def test_conv_and_pool_gradients_match_finite_differences(specs: tuple[LayerSpec, ...]) -> None:
    model = Network("tiny", (1, 6, 6), 3, specs)
    rng = np.random.default_rng(3)
    for _ in range(5):
        params, features, label = _random_point(model, rng)
        analytic = per_sample_grads(model, params, features[None, :], [label])[0]
        numeric = finite_diff_grad(model, params, features, label, 1e-6)
        assert max_relative_error(analytic, numeric) <= 1e-4


def test_duplicated_samples_get_identical_gradients() -> None:
    model = build_model("mlp", (4,), 3, hidden=6)
    params = init_params(model, 0)
    row = np.array([0.2, -0.4, 1.0, 0.7])
    grads = per_sample_grads(model, params, np.stack([row, row, row]), [1, 1, 1])
    np.testing.assert_allclose(grads[0], grads[1], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(grads[0], grads[2], rtol=1e-12, atol=1e-15)


def test_batch_gradients_match_single_sample_gradients() -> None:
    model = build_model("mlp", (4,), 3, hidden=6)
    rng = np.random.default_rng(4)
    params = init_params(model, 1)
    features = rng.standard_normal((5, 4))
    labels = np.array([0, 2, 1, 1, 0])
    batch = per_sample_grads(model, params, features, labels)
    for i in range(5):
        single = per_sample_grads(model, params, features[i : i + 1], labels[i : i + 1])[0]
        np.testing.assert_allclose(batch[i], single, rtol=1e-12, atol=1e-14)
    perm = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(per_sample_grads(model, params, features[perm], labels[perm]), batch[perm], rtol=1e-12, atol=1e-14)


def test_quadratic_gradient_is_one_lipschitz() -> None:
    model = QuadraticModel(6)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 6))
    for _ in range(50):
        u, v = rng.standard_normal(6), rng.standard_normal(6)
        gu = per_sample_grads(model, u, x, [0])[0]
        gv = per_sample_grads(model, v, x, [0])[0]
        assert np.linalg.norm(gu - gv) == pytest.approx(np.linalg.norm(u - v), rel=1e-12)


def test_quadratic_minimizer_is_sample_mean() -> None:
    features = np.array([[0.0, 2.0], [2.0, 4.0]])
    model = QuadraticModel(2)
    assert model.minimizer(features).tolist() == [1.0, 3.0]
    assert model.minimum_loss(features) == 1.0


def test_cnn_mnist_layer_shapes_and_parameter_count() -> None:
    model = build_model("cnn_mnist", (1, 28, 28), 10)
    shapes = [tuple(entry["output_shape"]) for entry in model.describe()]
    assert shapes[:6] == [(16, 13, 13), (16, 13, 13), (16, 12, 12), (32, 7, 7), (32, 7, 7), (32, 6, 6)]
    assert model.param_count == 46490


def test_cnn_needs_image_input() -> None:
    with pytest.raises(ModelError):
        build_model("cnn_mnist", (784,), 10)


def test_labels_outside_class_range_are_rejected() -> None:
    model = build_model("logreg", (3,), 3)
    params = np.zeros(model.param_count)
    with pytest.raises(ModelError, match="label -1 at sample index 0"):
        per_sample_loss(model, params, [0.1, 0.2, 0.3], -1)
    with pytest.raises(ModelError, match="label 3 at sample index 1"):
        per_sample_grads(model, params, np.ones((2, 3)), [2, 3])
    with pytest.raises(ValueError, match="every label must lie in"):
        Dataset(features=np.ones((2, 3)), labels=np.array([0, -1]), classes=3)


def test_unknown_model_name() -> None:
    with pytest.raises(ModelError, match="unknown model"):
        build_model("resnet", (4,), 2)


def test_init_params_seeded_and_biases_zero() -> None:
    model = build_model("logreg", (4,), 3)
    first = init_params(model, 7)
    assert np.array_equal(first, init_params(model, 7))
    assert np.all(np.abs(first[:12]) <= 0.5)
    assert first[12:].tolist() == [0.0, 0.0, 0.0]


def test_non_finite_activation_names_sample() -> None:
    model = build_model("logreg", (3,), 2)
    features = np.array([[0.1, 0.2, 0.3], [1e308, 1e308, 1e308]])
    with pytest.raises(ModelError, match="sample index 1"):
        per_sample_grads(model, np.ones(model.param_count), features, [0, 1])


def test_parameter_length_mismatch() -> None:
    model = build_model("logreg", (3,), 2)
    with pytest.raises(ModelError):
        per_sample_grads(model, np.zeros(model.param_count + 1), np.zeros((1, 3)), [0])


def test_accuracy_on_separable_points() -> None:
    model = build_model("logreg", (2,), 2)
    # class 1 logit is x0, class 0 logit is -x0
    params = np.array([-1.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    dataset = Dataset(np.array([[1.0, 0.0], [-2.0, 3.0], [0.5, -1.0]]), np.array([1, 0, 0]), 2)
    assert accuracy(model, params, dataset) == pytest.approx(2 / 3)
