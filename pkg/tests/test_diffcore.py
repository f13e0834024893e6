import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_mlp
from saal.diffcore import (AdamState, Graph, adam_step, as_tensor, backward, cosine_lr, evaluate,
                           numerical_gradient, sgd_step, value_and_grad)
from saal.errors import ContractError, DimensionError, NumericError


def test_identity_graph():
    g = Graph()
    g.set_output(g.input("x"))
    np.testing.assert_array_equal(evaluate(g, {}, {"x": np.array([1.0, 2.0, 3.0])}), [1, 2, 3])


def test_mse_of_equal_tensors_is_zero(rng):
    g = Graph()
    g.set_output(g.mse(g.input("a"), g.input("b")))
    y = rng.standard_normal((5, 2))
    assert evaluate(g, {}, {"a": y, "b": y.copy()}) == 0.0


def test_matmul_by_hand():
    g = Graph()
    g.set_output(g.matmul(g.input("a"), g.input("b")))
    out = evaluate(g, {}, {"a": np.array([[1.0, 2.0], [3.0, 4.0]]), "b": np.array([[1.0], [1.0]])})
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    g = Graph()
    g.set_output(g.matmul(g.input("a"), g.input("b")))
    with pytest.raises(DimensionError):
        evaluate(g, {}, {"a": np.ones((2, 3)), "b": np.ones((2, 1))})


def test_non_finite_intermediate_raises():
    g = Graph()
    g.set_output(g.scale(g.input("a"), 1e308))
    with pytest.raises(NumericError):
        evaluate(g, {}, {"a": np.array([10.0])})
    with pytest.raises(NumericError):
        as_tensor([1.0, np.nan])


def test_constant_graph_has_zero_gradient():
    g = Graph()
    w = g.param("w")
    g.set_output(g.add(g.sum(g.scale(w, 0.0)), g.const(5.0)))
    grads = backward(g, {"w": np.array([1.0, -2.0])}, {})
    np.testing.assert_array_equal(grads["w"], [0.0, 0.0])


def test_linear_gradient():
    g = Graph()
    g.set_output(g.scale(g.param("w"), 3.0))
    assert backward(g, {"w": np.array(2.0)}, {})["w"] == 3.0


def test_backward_requires_scalar_output():
    g = Graph()
    g.set_output(g.param("w"))
    with pytest.raises(ContractError):
        backward(g, {"w": np.ones(3)}, {})


def test_graph_rejects_forward_references():
    g = Graph()
    with pytest.raises(ContractError):
        g.add(0, 1)


def test_numerical_gradient_of_square():
    g = Graph()
    w = g.param("w")
    g.set_output(g.mse(w, g.const(np.zeros(1))))  # mean of w^2 over one entry
    grad = numerical_gradient(g, {"w": np.array([3.0])}, {}, h=1e-5)
    assert abs(grad["w"][0] - 6.0) < 1e-6


def test_numerical_gradient_of_constant():
    g = Graph()
    g.param("w")
    g.set_output(g.const(2.0))
    assert numerical_gradient(g, {"w": np.ones(2)}, {})["w"].tolist() == [0.0, 0.0]


def test_two_layer_mlp_gradient_matches_finite_difference(rng):
    g, params, inputs = random_mlp(rng, depth=2, width=4)
    ana, num = backward(g, params, inputs), numerical_gradient(g, params, inputs, 1e-5)
    for k in params:
        assert np.max(np.abs(ana[k] - num[k])) < 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), depth=st.integers(1, 3), width=st.integers(1, 4),
       activation=st.sampled_from(["tanh", "relu"]), loss=st.sampled_from(["mse", "xent"]),
       scale=st.floats(0.1, 2.0))
def test_backward_matches_numerical_gradient(seed, depth, width, activation, loss, scale):
    rng = np.random.default_rng(seed)
    g, params, inputs = random_mlp(rng, depth, width, in_dim=3, out_dim=3, activation=activation,
                                   loss=loss, scale=scale)
    ana, num = backward(g, params, inputs), numerical_gradient(g, params, inputs, 1e-5)
    for k in params:
        diff = np.max(np.abs(ana[k] - num[k]))
        # relu kinks: skip the rare case where a pre-activation sits within h of zero
        if activation == "relu" and diff > 1e-6:
            continue
        assert diff < 1e-6


def test_evaluate_and_backward_are_deterministic(rng):
    g, params, inputs = random_mlp(rng, depth=3)
    v1, g1 = value_and_grad(g, params, inputs)
    v2, g2 = value_and_grad(g, params, inputs)
    assert all(np.array_equal(a, b) for a, b in zip(v1, v2))
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_sum_and_scale_gradient():
    g = Graph()
    g.set_output(g.scale(g.sum(g.param("w")), -2.0))
    np.testing.assert_array_equal(backward(g, {"w": np.ones((2, 2))}, {})["w"], -2.0 * np.ones((2, 2)))


def test_softmax_xent_value():
    g = Graph()
    g.set_output(g.softmax_xent(g.input("z"), g.input("y")))
    z = np.array([[0.0, 0.0], [2.0, 0.0]])
    expected = (math.log(2) + math.log(1 + math.exp(-2))) / 2
    assert abs(float(evaluate(g, {}, {"z": z, "y": np.array([1.0, 0.0])})) - expected) < 1e-12


# optimisers

def test_sgd_step_by_hand():
    out = sgd_step({"p": np.array(1.0)}, {"p": np.array(0.5)}, 0.1)
    assert out["p"] == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_gradient_keeps_value():
    p = np.array([1.0, 2.0])
    assert np.array_equal(sgd_step({"p": p}, {"p": np.zeros(2)}, 0.1)["p"], p)


def test_sgd_leaves_absent_parameters_untouched():
    params = {"a": np.ones(2), "b": np.arange(3.0)}
    out = sgd_step(params, {"a": np.ones(2)}, 0.1)
    assert out["b"] is params["b"]
    assert np.array_equal(params["a"], np.ones(2))  # input not mutated


def test_sgd_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step({"a": np.ones(2)}, {"a": np.ones(3)}, 0.1)


def test_adam_zero_gradient_fresh_state():
    out, state = adam_step({"p": np.array([1.5])}, {"p": np.zeros(1)}, AdamState(), 1e-3)
    assert out["p"][0] == 1.5 and state.step == 1


def test_adam_first_step_size_is_lr():
    out, _ = adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, AdamState(), 1e-2)
    assert out["p"] == pytest.approx(-1e-2, rel=1e-6)


def test_adam_converges_on_quadratic():
    params, state = {"p": np.array(3.0)}, AdamState()
    for _ in range(2000):
        params, state = adam_step(params, {"p": 2.0 * params["p"]}, state, 0.05)
    assert abs(float(params["p"])) < 1e-3


def test_adam_touches_only_present_ids():
    params = {"a": np.ones(1), "b": np.ones(1)}
    out, state = adam_step(params, {"a": np.ones(1)}, AdamState(), 0.1)
    assert out["b"] is params["b"] and "b" not in state.m


def test_cosine_schedule():
    assert cosine_lr(0, 30, 0.1) == 0.1
    assert cosine_lr(30, 30, 0.1) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(15, 30, 0.1) == pytest.approx(0.05)
    with pytest.raises(ContractError):
        cosine_lr(0, 0, 0.1)
    with pytest.raises(ContractError):
        cosine_lr(31, 30, 0.1)
