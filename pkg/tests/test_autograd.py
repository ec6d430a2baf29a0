import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seekfind import functional as F
from seekfind.errors import NumericError, ShapeError
from seekfind.gradcheck import as_leaf, grad_check, standard_checks
from seekfind.tensor import Tensor, grad_enabled, make_result, no_grad

LAM, ALPHA = 1.0507009873554805, 1.6732632423543772


# ---------------------------------------------------------------- gradients

def test_every_layer_passes_gradient_check():
    for name, res in standard_checks(seed=0).items():
        assert res.passed(1e-4), f"{name}: {res.max_rel_error:.2e}"


def test_grad_check_flags_a_wrong_backward():
    def bad_square(x):
        def backward(g):
            x.accumulate(g * x.data)        # missing factor 2
        return make_result(x.data ** 2, (x,), backward, "bad")

    res = grad_check(bad_square, [as_leaf(np.array([1.0, 2.0, -3.0]))])
    assert not res.passed(1e-4)


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        grad_check(F.relu, [Tensor(np.ones(3, np.float32), requires_grad=True)])


def test_shared_input_accumulates_gradient():
    x = as_leaf(np.array([[1.0, -2.0]]))
    F.add(x, x).backward(np.ones((1, 2)))
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])


def test_backward_needs_scalar_or_explicit_gradient():
    x = as_leaf(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        F.relu(x).backward()


def test_interior_gradients_are_released():
    x = as_leaf(np.ones((1, 3)))
    mid = F.relu(x)
    F.softmax_cross_entropy(F.linear(mid, np.ones((3, 2)), np.zeros(2)), [1]).backward()
    assert mid.grad is None and x.grad is not None


def test_no_grad_is_thread_local():
    seen = []
    with no_grad():
        t = threading.Thread(target=lambda: seen.append(grad_enabled()))
        t.start()
        t.join()
        assert not grad_enabled()
    assert seen == [True] and grad_enabled()


def test_no_grad_records_nothing():
    x = as_leaf(np.ones((1, 2)))
    with no_grad():
        y = F.relu(x)
    assert not y.requires_grad and y._parents == ()


def test_non_finite_output_raises():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        F.linear(np.array([[1e308]]), np.array([[10.0]]), np.zeros(1))


# ---------------------------------------------------------------- SELU

def test_selu_constants_and_form():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
    want = np.where(x > 0, LAM * x, LAM * (ALPHA * np.exp(x) - ALPHA))
    np.testing.assert_allclose(F.selu(x).data, want, rtol=1e-15, atol=1e-15)


def test_selu_constants_validated():
    with pytest.raises(ValueError):
        F.SeluConstants(lam=0.9)


def test_selu_fixed_point_of_standard_normal():
    # mean 0 / variance 1 is preserved in expectation
    z = np.random.default_rng(0).standard_normal(2_000_000)
    y = F.selu(z).data
    assert abs(y.mean()) < 5e-3 and abs(y.var() - 1) < 5e-3


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-20, 20)))
def test_selu_monotone_and_bounded_below(x):
    y = F.selu(np.sort(x)).data
    assert np.all(np.diff(y) >= 0)
    assert np.all(y > -LAM * ALPHA)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)))
def test_relu_is_max_with_zero(x):
    np.testing.assert_array_equal(F.relu(x).data, np.maximum(x, 0))


# ---------------------------------------------------------------- shapes and errors

def test_conv_channel_mismatch_names_dimension():
    with pytest.raises(ShapeError) as err:
        F.conv2d(np.zeros((1, 3, 5, 5)), np.zeros((2, 4, 3, 3)), np.zeros(2))
    assert err.value.dim == "channels"


def test_conv_output_extent_below_one():
    with pytest.raises(ShapeError):
        F.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_macs_per_output_pixel():
    assert F.macs_per_output_pixel(3, 3, 1) == 9
    assert F.macs_per_output_pixel(1, 3, 8) + F.macs_per_output_pixel(3, 1, 8) == 48
    with pytest.raises(ValueError):
        F.macs_per_output_pixel(0, 3, 1)


def test_maxpool_gradient_goes_to_first_maximum():
    x = as_leaf(np.array([[[[1.0, 5.0], [5.0, 2.0]]]]))
    F.maxpool2d(x, 2, 2, 1).backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(x.grad[0, 0], [[0, 1], [0, 0]])


def test_maxpool_padding_never_wins():
    x = -np.ones((1, 1, 3, 3))
    assert np.all(F.maxpool2d(x, 4, 4, 1, (1, 2, 1, 2)).data == -1)


def test_batchnorm_single_sample_train_mode_rejected():
    st_ = F.BatchNormState.fresh(2, np.float64)
    with pytest.raises(ShapeError):
        F.batchnorm(np.zeros((1, 2)), np.ones(2), np.zeros(2), st_, "train")


def test_batchnorm_running_stats_use_unbiased_variance():
    x = np.array([[0.0], [2.0]])
    st_ = F.BatchNormState.fresh(1, np.float64, momentum=1.0)
    F.batchnorm(x, np.ones(1), np.zeros(1), st_, "train")
    assert st_.mean[0] == 1.0 and st_.var[0] == 2.0


def test_batchnorm_eval_uses_running_stats():
    st_ = F.BatchNormState(np.array([1.0]), np.array([4.0]), eps=0.0)
    out = F.batchnorm(np.array([[5.0]]), np.ones(1), np.zeros(1), st_, "eval").data
    assert out[0, 0] == pytest.approx(2.0)


def test_cross_entropy_value_and_gradient():
    z = as_leaf(np.array([[0.0, 0.0], [2.0, 0.0]]))
    loss = F.softmax_cross_entropy(z, [1, 0])
    p = 1 / (1 + np.exp(-2.0))
    assert loss.item() == pytest.approx((np.log(2) - np.log(p)) / 2)
    loss.backward()
    np.testing.assert_allclose(z.grad, [[0.25, -0.25], [(p - 1) / 2, (1 - p) / 2]])


def test_cross_entropy_rejects_wrong_class_count():
    with pytest.raises(ShapeError):
        F.softmax_cross_entropy(np.zeros((2, 3)), [0, 1])


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4))
def test_concat_then_split_roundtrip(n, a, b):
    rng = np.random.default_rng(n * 100 + a * 10 + b)
    x, y = rng.standard_normal((n, a, 2)), rng.standard_normal((n, b, 2))
    out = F.concat([x, y], axis=1).data
    np.testing.assert_array_equal(out[:, :a], x)
    np.testing.assert_array_equal(out[:, a:], y)
