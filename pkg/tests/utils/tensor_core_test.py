import numpy as np
import pytest

from transfer_attack_tools.utils import tensor_core as tc
from transfer_attack_tools.utils.errors import ShapeError, UsageError
from transfer_attack_tools.utils.tensor_core import ComputeGraph, Tensor


def _input_gradient(build, array: np.ndarray) -> np.ndarray:
    with ComputeGraph() as graph:
        x = Tensor(array, requires_grad=True)
        tc.backward(graph, tc.reduce_sum(build(x)))
    return x.grad


def _forward_sum(build):
    return lambda array: float(build(Tensor(array)).data.sum())


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12))


DENSE_WEIGHT = np.random.default_rng(5).normal(size=(3, 25))
DENSE_BIAS = np.array([0.1, -0.2, 0.3])


def test_tensor_keeps_float64_and_casts_others():
    # Arrange
    # Act
    double = Tensor(np.zeros(2, dtype=np.float64))
    integer = Tensor([1, 2])

    # Assert
    assert double.data.dtype == np.float64
    assert integer.data.dtype == np.float32


def test_item_needs_single_element():
    # Arrange
    tensor = Tensor([1.0, 2.0])

    # Act & Assert
    with pytest.raises(UsageError):
        tensor.item()


def test_conv2d_hand_computed():
    # Arrange
    image = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    kernel = Tensor(np.ones((1, 1, 2, 2)))

    # Act
    result = tc.conv2d(image, kernel)

    # Assert
    assert result.shape == (1, 1, 1)
    assert result.data[0, 0, 0] == 10.0


def test_conv2d_identity_kernel():
    # Arrange
    image = Tensor(np.random.default_rng(0).random((1, 5, 5)))

    # Act
    result = tc.conv2d(image, Tensor(np.ones((1, 1, 1, 1))))

    # Assert
    np.testing.assert_array_equal(result.data, image.data)


def test_conv2d_output_size_with_stride_and_padding():
    # Arrange
    image = Tensor(np.zeros((2, 3, 8, 8)))
    kernel = Tensor(np.zeros((4, 3, 3, 3)))

    # Act
    result = tc.conv2d(image, kernel, stride=2, padding=1)

    # Assert
    assert result.shape == (2, 4, 4, 4)


def test_conv2d_channel_mismatch():
    # Arrange
    image = Tensor(np.zeros((2, 4, 4)))
    kernel = Tensor(np.zeros((1, 3, 3, 3)))

    # Act & Assert
    with pytest.raises(ShapeError) as error:
        tc.conv2d(image, kernel)
    assert error.value.op == "conv2d"


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_input_gradient_matches_finite_differences(seed, numeric_gradient):
    # Arrange
    rng = np.random.default_rng(seed)
    array = rng.normal(size=(2, 5, 5))
    kernel = Tensor(rng.normal(size=(3, 2, 3, 3)))
    weights = rng.normal(size=(3, 3, 3))

    def build(x):
        return tc.mul(tc.conv2d(x, kernel, stride=2, padding=1), Tensor(weights))

    # Act
    analytic = _input_gradient(build, array)
    numeric = numeric_gradient(_forward_sum(build), array)

    # Assert
    assert _relative_error(analytic, numeric) < 1e-3


def test_conv2d_kernel_gradient_matches_finite_differences(numeric_gradient):
    # Arrange
    rng = np.random.default_rng(3)
    image = Tensor(rng.normal(size=(2, 2, 5, 5)))
    kernel_array = rng.normal(size=(2, 2, 3, 3))

    def build(kernel):
        return tc.square(tc.conv2d(image, kernel, padding=1))

    # Act
    analytic = _input_gradient(build, kernel_array)
    numeric = numeric_gradient(_forward_sum(build), kernel_array)

    # Assert
    assert _relative_error(analytic, numeric) < 1e-3


def test_dense_hand_computed():
    # Arrange
    weight = Tensor([[1.0, 2.0], [3.0, 4.0]])

    # Act
    result = tc.dense(Tensor([1.0, 1.0]), weight, Tensor([0.0, 0.0]))

    # Assert
    np.testing.assert_array_equal(result.data, [3.0, 7.0])


def test_dense_identity():
    # Arrange
    vector = Tensor([0.5, -2.0, 3.0])

    # Act
    result = tc.dense(vector, Tensor(np.eye(3)), Tensor(np.zeros(3)))

    # Assert
    np.testing.assert_array_equal(result.data, vector.data)


def test_dense_weight_gradient_matches_finite_differences(numeric_gradient):
    # Arrange
    rng = np.random.default_rng(1)
    vector = Tensor(rng.normal(size=(4, 5)))
    bias = Tensor(rng.normal(size=3))
    weight_array = rng.normal(size=(3, 5))

    def build(weight):
        return tc.square(tc.dense(vector, weight, bias))

    # Act
    analytic = _input_gradient(build, weight_array)
    numeric = numeric_gradient(_forward_sum(build), weight_array)

    # Assert
    assert _relative_error(analytic, numeric) < 1e-3


def test_dense_dimension_mismatch():
    # Arrange
    # Act & Assert
    with pytest.raises(ShapeError):
        tc.dense(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


def test_relu_forward_and_gradient():
    # Arrange
    array = np.array([-1.0, 2.0])

    # Act
    forward = tc.relu(Tensor([-1.0, 0.0, 2.0]))
    grad = _input_gradient(tc.relu, array)

    # Assert
    np.testing.assert_array_equal(forward.data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(grad, [0.0, 1.0])


@pytest.mark.parametrize("kind,expected", [("avg", 2.5), ("max", 4.0)])
def test_pool2d_window_two(kind, expected):
    # Arrange
    image = Tensor([[[1.0, 2.0], [3.0, 4.0]]])

    # Act
    result = tc.pool2d(image, kind, 2)

    # Assert
    assert result.data[0, 0, 0] == expected


@pytest.mark.parametrize("kind", ["avg", "max"])
def test_pool2d_window_one_is_identity(kind):
    # Arrange
    image = Tensor(np.random.default_rng(0).random((2, 3, 3)))

    # Act
    result = tc.pool2d(image, kind, 1, 1)

    # Assert
    np.testing.assert_array_equal(result.data, image.data)


def test_pool2d_max_routes_to_first_maximum():
    # Arrange
    array = np.array([[[5.0, 5.0], [1.0, 5.0]]])

    # Act
    grad = _input_gradient(lambda x: tc.pool2d(x, "max", 2), array)

    # Assert
    np.testing.assert_array_equal(grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_pool2d_avg_gradient_is_uniform():
    # Arrange
    array = np.arange(16, dtype=np.float64).reshape(1, 4, 4)

    # Act
    grad = _input_gradient(lambda x: tc.pool2d(x, "avg", 2), array)

    # Assert
    np.testing.assert_array_equal(grad, np.full((1, 4, 4), 0.25))


def test_pool2d_records_its_settings():
    # Arrange
    with ComputeGraph() as graph:
        image = Tensor(np.ones((1, 4, 4)), requires_grad=True)

        # Act
        pooled = tc.pool2d(image, "avg", 2)

    # Assert
    assert pooled.shape == (1, 2, 2)
    assert graph.kinds() == ["pool2d"]
    assert graph.nodes[0].params == {"kind": "avg", "window": 2, "stride": 2}


def test_pool2d_window_too_large():
    # Arrange
    # Act & Assert
    with pytest.raises(ShapeError):
        tc.pool2d(Tensor(np.zeros((1, 2, 2))), "max", 3)


def test_add_and_concat():
    # Arrange
    left, right = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])

    # Act
    total = tc.add(left, right)
    joined = tc.concat(Tensor([1.0]), Tensor([2.0]), axis=0)

    # Assert
    np.testing.assert_array_equal(total.data, [4.0, 6.0])
    np.testing.assert_array_equal(joined.data, [1.0, 2.0])


def test_add_shape_mismatch():
    # Arrange
    # Act & Assert
    with pytest.raises(ShapeError):
        tc.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_concat_gradient_splits():
    # Arrange
    with ComputeGraph() as graph:
        first = Tensor(np.ones((1, 2, 2)), requires_grad=True)
        second = Tensor(np.ones((2, 2, 2)), requires_grad=True)
        joined = tc.concat(first, second, axis=0)
        weights = Tensor(np.arange(12, dtype=np.float32).reshape(3, 2, 2))

        # Act
        tc.backward(graph, tc.reduce_sum(tc.mul(joined, weights)))

    # Assert
    np.testing.assert_array_equal(first.grad, weights.data[:1])
    np.testing.assert_array_equal(second.grad, weights.data[1:])


def test_softmax_values():
    # Arrange
    # Act
    even = tc.softmax(Tensor([0.0, 0.0]))
    skewed = tc.softmax(Tensor([1.0, 0.0]))
    huge = tc.softmax(Tensor([1000.0, 0.0]))

    # Assert
    np.testing.assert_allclose(even.data, [0.5, 0.5])
    np.testing.assert_allclose(skewed.data, [0.73106, 0.26894], atol=1e-5)
    assert np.all(np.isfinite(huge.data))
    assert huge.data[0] == pytest.approx(1.0)


def test_softmax_sums_to_one():
    # Arrange
    logits = Tensor(np.random.default_rng(5).normal(scale=5.0, size=(50, 10)))

    # Act
    probs = tc.softmax(logits).data

    # Assert
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((probs > 0) & (probs < 1))


def test_backward_needs_scalar():
    # Arrange
    with ComputeGraph() as graph:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = tc.relu(x)

    # Act & Assert
    with pytest.raises(UsageError):
        tc.backward(graph, y)


def test_backward_is_repeatable():
    # Arrange
    rng = np.random.default_rng(2)
    kernel = Tensor(rng.normal(size=(2, 1, 3, 3)))
    with ComputeGraph() as graph:
        x = Tensor(rng.normal(size=(1, 6, 6)), requires_grad=True)
        out = tc.reduce_sum(tc.square(tc.relu(tc.conv2d(x, kernel, padding=1))))

    # Act
    tc.backward(graph, out)
    first = x.grad.copy()
    tc.backward(graph, out)

    # Assert
    np.testing.assert_array_equal(first, x.grad)


def test_backward_visits_reverse_order_and_returns_leaves():
    # Arrange
    with ComputeGraph() as graph:
        x = Tensor([-1.0, 3.0], requires_grad=True)
        out = tc.reduce_sum(tc.relu(x))

    # Act
    leaves = tc.backward(graph, out)

    # Assert
    assert graph.kinds() == ["relu", "sum"]
    assert leaves == [x]
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_no_recording_outside_graph_or_without_grad():
    # Arrange
    with ComputeGraph() as graph:
        tc.relu(Tensor([1.0]))

    # Act
    detached = tc.relu(Tensor([1.0], requires_grad=True))

    # Assert
    assert graph.nodes == []
    assert tc.current_graph() is None
    assert detached.requires_grad


@pytest.mark.parametrize(
    "build",
    [
        lambda x: tc.resize_bilinear(x, 4, 3),
        lambda x: tc.pad2d(x, 1, 2, 8, 9),
        lambda x: tc.log_softmax(tc.reshape(x, (2, 25))),
        lambda x: tc.softmax(tc.reshape(x, (5, 10))),
        lambda x: tc.arccosh(tc.shift(tc.square(x), 1.5)),
        lambda x: tc.div(x, tc.shift(tc.absolute(x), 1.0)),
        lambda x: tc.sqrt(tc.shift(tc.square(x), 0.1)),
        lambda x: tc.reduce_max(tc.reshape(x, (10, 5)), axis=1),
        lambda x: tc.channel_affine(x, np.array([2.0, -1.0]), np.array([0.5, 0.0])),
        lambda x: tc.select(x, 1),
        lambda x: tc.relu(x),
        lambda x: tc.pool2d(x, "max", 2, 1),
        lambda x: tc.pool2d(x, "avg", 3, 2),
        lambda x: tc.add(x, tc.square(x)),
        lambda x: tc.concat(x, tc.scale(x, 2.0), axis=0),
        lambda x: tc.dense(tc.reshape(x, (2, 25)), Tensor(DENSE_WEIGHT), Tensor(DENSE_BIAS)),
    ],
)
def test_primitive_gradients_match_finite_differences(build, numeric_gradient):
    # Arrange
    rng = np.random.default_rng(11)
    array = rng.normal(size=(2, 5, 5))
    weights = rng.normal(size=build(Tensor(array)).shape)

    def weighted(x):
        return tc.mul(build(x), Tensor(weights))

    # Act
    analytic = _input_gradient(weighted, array)
    numeric = numeric_gradient(_forward_sum(weighted), array)

    # Assert
    assert _relative_error(analytic, numeric) < 1e-3


def test_resize_bilinear_same_size_is_identity():
    # Arrange
    image = Tensor(np.random.default_rng(0).random((3, 6, 6)))

    # Act
    result = tc.resize_bilinear(image, 6, 6)

    # Assert
    np.testing.assert_allclose(result.data, image.data, atol=1e-7)


def test_gather_scatters_gradient():
    # Arrange
    with ComputeGraph() as graph:
        logits = Tensor(np.zeros((2, 3)), requires_grad=True)
        picked = tc.gather(logits, np.array([[0, 0], [2, 1]]))

        # Act
        tc.backward(graph, tc.reduce_sum(picked))

    # Assert
    np.testing.assert_array_equal(logits.grad, [[2.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
