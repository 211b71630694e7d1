import math

import numpy as np
import pytest

from errors import DimensionError, LabelError, NonFiniteError
from numerics import (Linear, Mlp, OptimizerState, SGD, Tensor, check_gradients, cross_entropy,
                      default_dtype, finite_diff_grad, inject_fault, layer_norm, matmul, precision, relative_error,
                      relu, rng_for, scaled_error, segment_sum, sgd_step, softmax, sum_, take)


def test_precision_switches_and_restores_dtype():
    assert default_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_softmax_rows_sum_to_one(float64, rng):
    x = Tensor(rng.standard_normal((6, 5, 3)) * 10)
    y = softmax(x, axis=1)
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_of_large_equal_logits_is_uniform(float64):
    np.testing.assert_allclose(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-12)


def test_masked_softmax_gives_masked_entries_zero_weight(float64, rng):
    mask = np.array([[True, False, True], [True, True, False]])
    y = softmax(Tensor(rng.standard_normal((2, 3))), axis=1, mask=mask)
    assert np.all(y.data[~mask] == 0.0)
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_of_zero_logits_is_log_k(float64):
    loss = cross_entropy(Tensor(np.zeros(10)), [3])
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(LabelError):
        cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_batched_matmul_matches_row_by_row_products(float64, rng):
    a = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    out = matmul(a, b)
    assert out.shape == (3, 4, 2)
    np.testing.assert_allclose(out.data, np.einsum("ijk,kl->ijl", a.data, b.data), atol=1e-12)
    sum_(out).backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (3, 4, 5)), atol=1e-12)
    np.testing.assert_allclose(b.grad, np.broadcast_to(a.data.sum(axis=(0, 1))[:, None], (5, 2)), atol=1e-12)


def test_zero_linear_layer_outputs_zeros(rng):
    layer = Linear(4, 32, rng).zero_()
    out = layer(Tensor(rng.standard_normal((10, 4))))
    assert out.shape == (10, 32)
    assert np.all(out.data == 0)


def test_take_accumulates_repeated_rows(float64):
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    sum_(take(x, np.array([0, 0, 2]))).backward()
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_segment_sum_adds_rows_per_segment():
    x = Tensor(np.array([[1.0], [2.0], [4.0]]))
    out = segment_sum(x, np.array([1, 0, 1]), 2)
    np.testing.assert_array_equal(out.data, [[2.0], [5.0]])


def test_layer_norm_rows_have_zero_mean_unit_variance(float64, rng):
    x = Tensor(rng.standard_normal((5, 8)) * 3 + 1)
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-4)


def test_finite_diff_of_sum_of_squares():
    x = np.array([1.0, -2.0, 0.5])
    grad = finite_diff_grad(lambda v: float(np.sum(v ** 2)), x)
    np.testing.assert_allclose(grad, 2 * x, atol=1e-8)


def test_mlp_passes_gradient_check(float64, rng):
    mlp = Mlp.build(5, 3, rng, hidden=6)
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    weights = Tensor(rng.standard_normal((4, 3)))
    errors = check_gradients(lambda: sum_(mlp(x) * weights), [x, *mlp.parameters()])
    assert max(errors) <= 1e-5


def test_fault_injection_breaks_the_gradient_check(float64, rng):
    x = Tensor(rng.standard_normal((4, 5)) + 0.1, requires_grad=True)
    weights = Tensor(rng.standard_normal((4, 5)))
    with inject_fault("relu"):
        errors = check_gradients(lambda: sum_(relu(x) * weights), [x])
    assert max(errors) > 1e-3


def test_scaled_error_is_absolute_below_unit_gradients():
    analytic, numeric = np.array([1e-3, 0.0]), np.array([2e-3, 0.0])
    assert scaled_error(analytic, numeric) == pytest.approx(1e-3)
    assert relative_error(analytic, numeric) == pytest.approx(0.5)
    large = np.array([100.0]), np.array([101.0])
    assert scaled_error(*large) == relative_error(*large) == pytest.approx(1 / 101)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_check_gradients_accepts_another_metric(float64, rng):
    x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    errors = check_gradients(lambda: sum_(x * x), [x], metric=relative_error)
    assert errors[0] <= 1e-6


def test_non_finite_result_raises_when_verifying():
    with precision("float64", verify_finite=True):
        with pytest.raises(NonFiniteError):
            Tensor([np.inf]) * 0.0


def test_sgd_step_applies_momentum():
    state = OptimizerState(lr=0.1, momentum=0.9)
    params = [np.array([1.0])]
    params = sgd_step(params, [np.array([1.0])], state)
    np.testing.assert_allclose(params[0], [0.9])
    params = sgd_step(params, [np.array([1.0])], state)
    np.testing.assert_allclose(params[0], [0.71])


def test_sgd_step_without_gradient_is_a_fixed_point():
    state = OptimizerState(lr=0.1, momentum=0.9)
    params = sgd_step([np.array([0.9])], [np.array([0.0])], state)
    np.testing.assert_array_equal(params[0], [0.9])
    np.testing.assert_array_equal(state.momentum_buffers[0], [0.0])


def test_sgd_with_zero_rate_leaves_parameters_unchanged(rng):
    layer = Linear(3, 2, rng)
    before = layer.state_dict()
    optimizer = SGD(layer.parameters(), lr=0.0)
    sum_(layer(Tensor(rng.standard_normal((4, 3))))).backward()
    optimizer.step()
    for name, value in layer.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_state_dict_round_trip(rng):
    source, target = Mlp.build(3, 2, rng), Mlp.build(3, 2, rng)
    target.load_state_dict(source.state_dict())
    x = Tensor(rng.standard_normal((5, 3)))
    np.testing.assert_array_equal(source(x).data, target(x).data)


def test_load_state_dict_rejects_wrong_shapes(rng):
    with pytest.raises(DimensionError):
        Mlp.build(3, 2, rng).load_state_dict(Mlp.build(4, 2, rng).state_dict())


def test_rng_for_is_deterministic_per_stream():
    assert rng_for(7, 1, 2).integers(0, 1 << 30) == rng_for(7, 1, 2).integers(0, 1 << 30)
    assert rng_for(7, 1, 2).integers(0, 1 << 30) != rng_for(7, 2, 1).integers(0, 1 << 30)
