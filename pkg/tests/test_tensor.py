import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierafl import tensor as T

from .conftest import assert_grads_close, finite_difference

finite_rows = arrays(
    np.float64,
    st.tuples(st.integers(1, 4), st.integers(1, 5)),
    elements=st.floats(-30, 30, allow_nan=False),
)


class TestLinear:
    def test_identity(self):
        out = T.linear_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_hand_sum(self):
        out = T.linear_forward(np.array([[1.0, 1.0]]), np.array([[2.0, 3.0], [4.0, 5.0]]), np.ones(2))
        np.testing.assert_array_equal(out.data, [[7.0, 9.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            T.linear_forward(np.ones((1, 2)), np.ones((3, 2)), np.zeros(2))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(T.softmax(np.zeros((1, 2))).data, [[0.5, 0.5]])

    def test_no_overflow(self):
        np.testing.assert_array_equal(T.softmax(np.array([[1000.0, 1000.0]])).data, [[0.5, 0.5]])

    def test_closed_form(self):
        p = T.softmax(np.array([[math.log(2), 0.0]])).data
        np.testing.assert_allclose(p, [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)

    @given(finite_rows, st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, z, shift):
        p = T.softmax(z).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(p > 0)
        np.testing.assert_allclose(T.softmax(z + shift).data, p, rtol=0, atol=1e-12)


class TestCrossEntropy:
    def test_confident(self):
        assert T.cross_entropy(np.array([[10.0, -10.0]]), [0]).data < 1e-6

    def test_uniform_two(self):
        assert T.cross_entropy(np.zeros((1, 2)), [1]).data == pytest.approx(math.log(2), abs=1e-15)

    def test_uniform_four(self):
        assert T.cross_entropy(np.zeros((1, 4)), [2]).data == pytest.approx(math.log(4), abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            T.cross_entropy(np.zeros((1, 2)), [2])
        with pytest.raises(ValueError):
            T.cross_entropy(np.zeros((1, 2)), [-1])

    @given(finite_rows, st.data())
    def test_equals_kl_against_onehot(self, z, data):
        B, C = z.shape
        y = data.draw(st.lists(st.integers(0, C - 1), min_size=B, max_size=B))
        ce = T.cross_entropy(z, y).data
        kl = T.kl_divergence(np.eye(C)[y], z).data
        assert ce == pytest.approx(kl, rel=1e-12, abs=1e-12)


def _logits_for(probs):
    return np.log(np.asarray(probs, dtype=np.float64))


class TestKL:
    def test_identical(self):
        assert T.kl_divergence(np.array([[0.5, 0.5]]), np.zeros((1, 2))).data == 0.0

    def test_direct_sum(self):
        expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        assert expected == pytest.approx(0.14384, abs=5e-6)
        value = T.kl_divergence(np.array([[0.5, 0.5]]), _logits_for([[0.25, 0.75]])).data
        assert value == pytest.approx(expected, abs=1e-14)

    def test_zero_teacher_term_dropped(self):
        value = T.kl_divergence(np.array([[1.0, 0.0]]), np.zeros((1, 2))).data
        assert value == pytest.approx(math.log(2), abs=1e-15)

    def test_invalid_teacher(self):
        with pytest.raises(ValueError):
            T.kl_divergence(np.array([[0.6, 0.6]]), np.zeros((1, 2)))

    def test_no_gradient_into_teacher(self):
        teacher = T.parameter(np.array([[0.3, 0.7]]), "teacher")
        student = T.parameter(np.zeros((1, 2)), "student")
        grads = T.backward(T.kl_divergence(teacher, student))
        assert set(grads) == {"student"}

    @given(finite_rows, st.data())
    def test_nonnegative_and_zero_on_self(self, z, data):
        other = data.draw(arrays(np.float64, z.shape, elements=st.floats(-30, 30)))
        teacher = T.softmax(other).data
        assert T.kl_divergence(teacher, z).data >= -1e-12
        assert abs(T.kl_divergence(T.softmax(z).data, z).data) <= 1e-9


class TestMSE:
    def test_values(self):
        a = np.array([1.0, 2.0])
        assert T.mean_squared_error(a, a).data == 0.0
        assert T.mean_squared_error(a, np.array([3.0, 2.0])).data == 2.0
        assert T.mean_squared_error(np.array([0.0]), np.array([1.0])).data == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.mean_squared_error(np.ones(2), np.ones(3))

    def test_gradient_only_into_student_when_teacher_constant(self):
        x = T.parameter(np.array([1.0, -2.0]), "x")
        grads = T.backward(T.mean_squared_error(x, np.array([1.0, -2.0])))
        np.testing.assert_array_equal(grads["x"], [0.0, 0.0])


class TestBackward:
    def test_square(self):
        w = T.parameter(3.0, "w")
        assert T.backward(w * w)["w"] == pytest.approx(6.0)

    def test_rejects_non_scalar(self):
        w = T.parameter(np.ones(2), "w")
        with pytest.raises(ValueError):
            T.backward(w * 2.0)

    def test_constants_absent(self):
        w = T.parameter(np.ones((2, 2)), "w")
        c = T.Tensor(np.ones((2, 2)))
        grads = T.backward(T.mean(c @ w))
        assert set(grads) == {"w"}

    def test_shared_leaf_accumulates(self):
        w = T.parameter(np.array([2.0]), "w")
        grads = T.backward(T.reduce_sum(w * w + w * 3.0))
        np.testing.assert_allclose(grads["w"], [7.0])

    def test_non_finite_rejected(self):
        with pytest.raises(T.NonFiniteError):
            T.Tensor([np.inf])


def _random_net(rng, depth, width_max=16):
    dims = [int(rng.integers(1, width_max + 1)) for _ in range(depth + 1)]
    params = {}
    for layer in range(depth):
        params[f"W{layer}"] = rng.normal(size=(dims[layer], dims[layer + 1]))
        params[f"b{layer}"] = rng.normal(size=dims[layer + 1]) * 0.1
    return params, dims


def _composite_loss(params, x, y, teacher, depth):
    h = T.as_tensor(x)
    for layer in range(depth):
        h = T.linear_forward(h, params[f"W{layer}"], params[f"b{layer}"])
        if layer < depth - 1:
            h = T.relu(h)
    ce = T.cross_entropy(h, y)
    kl = T.kl_divergence(teacher, h)
    mse = T.mean_squared_error(T.softmax(h), teacher)
    mix = -T.mean(T.log(T.pick(T.softmax(h) * 0.5 + teacher * 0.5, y)))
    return ce + 0.7 * kl + 0.3 * mse + mix


def gradient_fixture(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    params, dims = _random_net(rng, depth)
    B = int(rng.integers(1, 6))
    C = dims[-1]
    x = rng.normal(size=(B, dims[0]))
    y = rng.integers(0, C, size=B)
    teacher = T.softmax(rng.normal(size=(B, C))).data
    return params, x, y, teacher, depth


def check_gradient_fixture(seed):
    params, x, y, teacher, depth = gradient_fixture(seed)
    analytic = T.backward(_composite_loss(T.bind(params), x, y, teacher, depth))
    numeric = finite_difference(lambda p: float(_composite_loss(p, x, y, teacher, depth).data), params)
    assert_grads_close(analytic, numeric)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    check_gradient_fixture(seed)


@pytest.mark.parametrize("seed", range(3))
def test_small_sgd_step_decreases_loss(seed):
    params, x, y, teacher, depth = gradient_fixture(seed)
    loss = _composite_loss(T.bind(params), x, y, teacher, depth)
    stepped = T.sgd_step(params, T.backward(loss), 1e-4)
    after = _composite_loss(stepped, x, y, teacher, depth)
    assert after.data < loss.data


class TestSGD:
    def test_step(self):
        out = T.sgd_step({"p": np.array(1.0)}, {"p": np.array(2.0)}, 0.5)
        assert out["p"] == 0.0

    def test_rejects_zero_lr(self):
        with pytest.raises(ValueError):
            T.sgd_step({"p": np.array(1.0)}, {}, 0.0)

    def test_empty_grads(self):
        params = {"p": np.array([1.0, 2.0])}
        out = T.sgd_step(params, {}, 0.1)
        np.testing.assert_array_equal(out["p"], params["p"])

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            T.sgd_step({"p": np.array(1.0)}, {"q": np.array(1.0)}, 0.1)


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_softmax_gradient_of_single_entry(values):
    z = T.parameter(np.array([values]), "z")
    grads = T.backward(T.reduce_sum(T.softmax(z) * np.eye(len(values))[0]))
    s = T.softmax(np.array([values])).data[0]
    expected = s[0] * (np.eye(len(values))[0] - s)
    np.testing.assert_allclose(grads["z"][0], expected, atol=1e-12)
