# tests/unit/test_autodiff.py
"""
Unit tests for app/autodiff.py.

Covers the forward values of every operation, the backward contract
(accumulation, stop_gradient, tape order), strict-mode failures and a
finite-difference gradient check of every differentiable operation over 100
random trials each.
"""
import logging
import math

import numpy as np
import pytest

from app import autodiff as ad
from app.autodiff import GradTape, Tensor
from app.errors import NumericalError, ShapeError

GRAD_TOL = 1e-4
N_TRIALS = 100


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    """Scalar reduction with non-uniform weights so every coordinate matters."""
    return ad.tensor_sum(ad.mul(t, Tensor(w)))


def _away_from(x: np.ndarray, points, margin: float = 1e-3) -> np.ndarray:
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.where(x >= p, margin, -margin) * 2, x)
    return x


# ---------------------------------------------
# elementwise operations
# ---------------------------------------------
@pytest.mark.parametrize(
    "op, a, b, expected",
    [
        (ad.add, [1.0, 2.0], [3.0, 4.0], [4.0, 6.0]),
        (ad.sub, [1.0, 2.0], [3.0, 5.0], [-2.0, -3.0]),
        (ad.mul, [1.5, -2.0], [2.0, 3.0], [3.0, -6.0]),
        (ad.div, [1.0, 3.0], [4.0, -2.0], [0.25, -1.5]),
        (ad.mul, [1.0, 2.0, 3.0], 2.0, [2.0, 4.0, 6.0]),
    ],
    ids=["add_vectors", "sub_vectors", "mul_vectors", "div_vectors", "scalar_mul"],
)
def test_binary_forward(op, a, b, expected):
    result = op(Tensor(a), b)
    assert result.data.tolist() == expected


@pytest.mark.parametrize(
    "op, x, expected",
    [
        (ad.relu, [-1.0, 0.0, 2.0], [0.0, 0.0, 2.0]),
        (ad.neg, [1.0, -2.0], [-1.0, 2.0]),
        (ad.exp, [0.0], [1.0]),
        (ad.log, [1.0, math.e], [0.0, 1.0]),
    ],
    ids=["relu", "neg", "exp_zero", "log"],
)
def test_unary_forward(op, x, expected):
    np.testing.assert_allclose(op(Tensor(x)).data, expected, rtol=0, atol=1e-15)


def test_operator_overloads_match_functions():
    """Python operators on tensors give the elementwise results, scalars on either side."""
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert (a + b).data.tolist() == [4.0, 7.0]
    assert (2.0 - a).data.tolist() == [1.0, 0.0]
    assert (a * 3).data.tolist() == [3.0, 6.0]
    assert (1.0 / b).data.tolist() == [1.0 / 3.0, 0.2]
    assert (-a).data.tolist() == [-1.0, -2.0]


def test_mismatched_shapes_raise_shape_error(caplog):
    with caplog.at_level(logging.ERROR):
        with pytest.raises(ShapeError) as exc_info:
            ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    assert exc_info.value.left == (2,) and exc_info.value.right == (3,)
    assert any("Shape mismatch in add" in r.message for r in caplog.records)


def test_item_requires_single_element():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_exp_derivative_at_one():
    x = ad.parameter([1.0])
    ad.backward(ad.tensor_sum(ad.exp(x)))
    assert abs(x.grad[0] - math.e) < 1e-12
    assert ad.finite_diff_check(lambda t: ad.tensor_sum(ad.exp(t)), x) < 1e-6


# ---------------------------------------------
# matmul and layers
# ---------------------------------------------
def test_matmul_identity(rng):
    x = rng.normal(size=(2, 2))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)


def test_matmul_hand_expansion():
    result = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert result.data.tolist() == [[17.0], [39.0]]


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


def test_matmul_gradient_3x4_by_4x2(rng):
    b = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    a = ad.parameter(rng.normal(size=(3, 4)))
    assert ad.finite_diff_check(lambda t: _weighted(ad.matmul(t, Tensor(b)), w), a) < GRAD_TOL


def test_conv2d_unit_kernel_is_identity(rng):
    """A 1x1 identity kernel without bias returns its input."""
    x = rng.normal(size=(2, 4, 4))
    kernel = np.zeros((2, 2, 1, 1))
    kernel[0, 0, 0, 0] = kernel[1, 1, 0, 0] = 1.0
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(kernel)).data, x)


def test_conv2d_all_ones():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 9.0


@pytest.mark.parametrize(
    "size, kernel, stride, padding, expected",
    [
        (5, 3, 1, 0, 3),
        (5, 3, 1, 1, 5),
        (6, 3, 2, 1, 3),
        (7, 1, 3, 0, 3),
    ],
    ids=["valid", "same_padding", "stride_two", "unit_kernel_stride_three"],
)
def test_conv2d_output_extent(size, kernel, stride, padding, expected):
    out = ad.conv2d(Tensor(np.ones((2, 1, size, size))), Tensor(np.ones((3, 1, kernel, kernel))), stride=stride, padding=padding)
    assert out.shape == (2, 3, expected, expected)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_max_pool_picks_window_maxima():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert ad.max_pool2d(Tensor(x)).data[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]


def test_max_pool_requires_even_extent():
    with pytest.raises(ShapeError):
        ad.max_pool2d(Tensor(np.ones((1, 1, 3, 4))))


# ---------------------------------------------
# log_softmax
# ---------------------------------------------
def test_log_softmax_uniform():
    out = ad.log_softmax(Tensor(np.zeros((1, 4))))
    np.testing.assert_allclose(out.data, np.full((1, 4), -math.log(4.0)), rtol=0, atol=1e-15)


def test_log_softmax_known_values():
    out = ad.log_softmax(Tensor([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(out.data[0], [-2.40760596, -1.40760596, -0.40760596], atol=1e-8)


def test_log_softmax_shift_invariance(rng):
    """Adding a constant to every logit of a row leaves log-softmax unchanged."""
    x = rng.normal(size=(5, 6))
    shifted = ad.log_softmax(Tensor(x + 17.25)).data
    np.testing.assert_allclose(shifted, ad.log_softmax(Tensor(x)).data, rtol=0, atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    for _ in range(20):
        x = rng.uniform(-50.0, 50.0, size=(8, 7))
        sums = ad.softmax(Tensor(x)).data.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) < 1e-9)


# ---------------------------------------------
# stop_gradient and backward
# ---------------------------------------------
def test_stop_gradient_copies_values_and_detaches():
    x = ad.parameter([1.0, -2.0])
    y = ad.stop_gradient(ad.mul(x, 3.0))
    assert y.data.tolist() == [3.0, -6.0]
    assert y.requires_grad is False and y.grad_node is None


def test_stop_gradient_product_rule():
    """In ``stop_gradient(x) * x`` only the live factor contributes to the gradient."""
    x = ad.parameter([1.5, -2.0, 0.5])
    ad.backward(ad.tensor_sum(ad.mul(ad.stop_gradient(x), x)))
    np.testing.assert_array_equal(x.grad, x.data)


def test_parameters_behind_stop_gradient_get_zero_gradient(rng):
    w = ad.parameter(rng.normal(size=(3, 3)))
    v = ad.parameter(rng.normal(size=(3, 3)))
    detached = ad.stop_gradient(ad.matmul(Tensor(np.eye(3)), w))
    ad.backward(ad.tensor_sum(ad.mul(detached, v)))
    assert w.grad is None or not np.any(w.grad)
    np.testing.assert_array_equal(v.grad, detached.data)


def test_backward_sum_gives_ones():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x = ad.parameter([1.0, 2.0])
    ad.backward(ad.tensor_sum(ad.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_until_zeroed():
    """Two backward passes add their gradients; ``zero_grad`` starts over."""
    x = ad.parameter([1.0, 2.0])
    ad.backward(ad.tensor_sum(ad.mul(x, x)))
    ad.backward(ad.tensor_sum(ad.mul(x, x)))
    assert x.grad.tolist() == [4.0, 8.0]
    ad.zero_grads([x])
    assert x.grad is None


def test_backward_rejects_non_scalar(caplog):
    with caplog.at_level(logging.ERROR):
        with pytest.raises(ShapeError):
            ad.backward(ad.mul(ad.parameter([1.0, 2.0]), 2.0))
    assert any("non-scalar" in r.message for r in caplog.records)


def test_every_reachable_leaf_gets_a_gradient_of_its_shape(rng):
    a = ad.parameter(rng.normal(size=(2, 3)))
    b = ad.parameter(rng.normal(size=(3, 4)))
    bias = ad.parameter(np.zeros(4))
    out = ad.add_bias(ad.matmul(a, b), bias)
    tape = ad.backward(ad.tensor_sum(ad.relu(out)))
    for leaf in (a, b, bias):
        assert leaf.grad is not None and leaf.grad.shape == leaf.shape
    assert {id(t) for t in tape.leaves} == {id(a), id(b), id(bias)}


def test_tape_records_are_topologically_ordered(rng):
    """Every record comes after the records that produced its inputs; shared nodes appear once."""
    x = ad.parameter(rng.normal(size=(3,)))
    shared = ad.exp(x)
    loss = ad.tensor_sum(ad.add(ad.mul(shared, shared), ad.log(ad.add(shared, 1.0))))
    tape = GradTape.from_output(loss)
    position = {id(record.output): i for i, record in enumerate(tape.records)}
    for i, record in enumerate(tape.records):
        for inp in record.node.inputs:
            if inp.grad_node is not None:
                assert position[id(inp)] < i
    assert len({id(r.output) for r in tape.records}) == len(tape)


def test_tape_replay_is_bit_identical(rng):
    data = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 3))

    def run():
        x = ad.parameter(data)
        loss = ad.tensor_mean(ad.log_softmax(ad.matmul(x, Tensor(w))))
        ad.backward(loss)
        return loss.item(), x.grad

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


def test_no_grad_records_nothing():
    x = ad.parameter([1.0, 2.0])
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y.requires_grad is False and y.grad_node is None


# ---------------------------------------------
# strict mode
# ---------------------------------------------
def test_strict_mode_names_failing_operation(caplog):
    """In strict mode the first non-finite result raises NumericalError naming its operation."""
    with caplog.at_level(logging.ERROR):
        with pytest.raises(NumericalError) as exc_info:
            ad.log(Tensor([0.0, 1.0]))
    assert exc_info.value.op == "log"
    assert "non-finite value produced by log" in str(exc_info.value)
    assert any("Non-finite output from log" in r.message for r in caplog.records)


def test_non_strict_mode_lets_infinities_through():
    with ad.strict_mode(False):
        assert not ad.is_strict()
        out = ad.log(Tensor([0.0]))
    assert out.data[0] == -np.inf
    assert ad.is_strict()


# ---------------------------------------------
# finite-difference gradient checks
# ---------------------------------------------
def test_finite_diff_exact_for_linear_function(rng):
    x = ad.parameter(rng.normal(size=(3, 4)))
    assert ad.finite_diff_check(lambda t: t.sum(), x) < 1e-10


def test_finite_diff_relu_in_smooth_region(rng):
    x = ad.parameter(rng.uniform(0.1, 2.0, size=(6,)))
    assert ad.finite_diff_check(lambda t: ad.tensor_sum(ad.relu(t)), x) < 1e-6


def _pool_input(rng, shape):
    # distinct values so no window holds a near-tie
    values = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1
    return values + rng.uniform(-0.01, 0.01, size=shape)


# (name, input shape, scalar function of (x, c, w)); c and w are 6×6 constants
GRAD_CASES = [
    ("add", (2, 3), lambda x, c, w: _weighted(ad.add(x, Tensor(c[:2, :3])), w[:2, :3])),
    ("sub", (2, 3), lambda x, c, w: _weighted(ad.sub(Tensor(c[:2, :3]), x), w[:2, :3])),
    ("mul", (2, 3), lambda x, c, w: _weighted(ad.mul(x, x), w[:2, :3])),
    ("div", (2, 3), lambda x, c, w: _weighted(ad.div(x, ad.add(ad.mul(x, x), 1.0)), w[:2, :3])),
    ("scale", (4,), lambda x, c, w: _weighted(ad.scale(x, -1.7), w[0, :4])),
    ("neg", (4,), lambda x, c, w: _weighted(ad.neg(x), w[0, :4])),
    ("exp", (2, 3), lambda x, c, w: _weighted(ad.exp(x), w[:2, :3])),
    ("log", (2, 3), lambda x, c, w: _weighted(ad.log(ad.add(ad.mul(x, x), 0.5)), w[:2, :3])),
    ("relu", (2, 3), lambda x, c, w: _weighted(ad.relu(x), w[:2, :3])),
    ("clip", (2, 3), lambda x, c, w: _weighted(ad.clip(x, -0.5, 0.5), w[:2, :3])),
    ("sum_axis", (3, 4), lambda x, c, w: _weighted(ad.tensor_sum(ad.mul(x, x), axis=1), w[:3, 0])),
    ("mean", (3, 4), lambda x, c, w: ad.tensor_mean(ad.mul(x, Tensor(w[:3, :4])))),
    ("reshape", (2, 6), lambda x, c, w: _weighted(ad.reshape(ad.mul(x, x), (3, 4)), w[:3, :4])),
    ("concat", (2, 3), lambda x, c, w: _weighted(ad.concat([x, ad.mul(x, x)]), w[:4, :3])),
    ("slice_rows", (4, 3), lambda x, c, w: _weighted(ad.slice_rows(ad.exp(x), 1, 3), w[:2, :3])),
    ("matmul", (3, 4), lambda x, c, w: _weighted(ad.matmul(x, Tensor(c[:4, :2])), w[:3, :2])),
    ("add_bias", (3,), lambda x, c, w: _weighted(ad.add_bias(Tensor(c[:2, :3]), ad.mul(x, x)), w[:2, :3])),
    ("log_softmax", (3, 4), lambda x, c, w: _weighted(ad.log_softmax(x), w[:3, :4])),
    ("softmax", (2, 5), lambda x, c, w: _weighted(ad.softmax(x), w[:2, :5])),
]


@pytest.mark.parametrize("index, name, shape, fn", [(i, *case) for i, case in enumerate(GRAD_CASES)], ids=[case[0] for case in GRAD_CASES])
def test_gradients_match_finite_differences(index, name, shape, fn):
    trial_rng = np.random.default_rng(100 + index)
    worst = 0.0
    for _ in range(N_TRIALS):
        x_data = trial_rng.normal(size=shape)
        if name == "relu":
            x_data = _away_from(x_data, [0.0])
        if name == "clip":
            x_data = _away_from(x_data, [-0.5, 0.5])
        c = trial_rng.normal(size=(6, 6))
        w = trial_rng.normal(size=(6, 6))
        x = ad.parameter(x_data)
        worst = max(worst, ad.finite_diff_check(lambda t: fn(t, c, w), x))
    assert worst < GRAD_TOL, f"{name}: max relative error {worst:.3g}"


def test_conv2d_input_gradient_2x5x5():
    trial_rng = np.random.default_rng(7)
    for _ in range(N_TRIALS):
        kernels = Tensor(trial_rng.normal(size=(3, 2, 3, 3)))
        bias = Tensor(trial_rng.normal(size=(3,)))
        w = trial_rng.normal(size=(3, 5, 5))
        x = ad.parameter(trial_rng.normal(size=(2, 5, 5)))
        err = ad.finite_diff_check(lambda t: _weighted(ad.conv2d(t, kernels, bias, stride=1, padding=1), w), x)
        assert err < GRAD_TOL


def test_conv2d_kernel_and_bias_gradients():
    trial_rng = np.random.default_rng(8)
    for _ in range(N_TRIALS):
        x = Tensor(trial_rng.normal(size=(2, 2, 6, 6)))
        w = trial_rng.normal(size=(2, 3, 3, 3))
        kernels = ad.parameter(trial_rng.normal(size=(3, 2, 3, 3)))
        bias = ad.parameter(trial_rng.normal(size=(3,)))
        assert ad.finite_diff_check(lambda k: _weighted(ad.conv2d(x, k, bias, stride=2, padding=1), w), kernels) < GRAD_TOL
        assert ad.finite_diff_check(lambda b: _weighted(ad.conv2d(x, kernels, b, stride=2, padding=1), w), bias) < GRAD_TOL


def test_max_pool_gradient():
    """Max-pool gradients match central differences on inputs without ties."""
    trial_rng = np.random.default_rng(9)
    for _ in range(N_TRIALS):
        w = trial_rng.normal(size=(1, 2, 2, 2))
        x = ad.parameter(_pool_input(trial_rng, (1, 2, 4, 4)))
        assert ad.finite_diff_check(lambda t: _weighted(ad.max_pool2d(t), w), x) < GRAD_TOL
