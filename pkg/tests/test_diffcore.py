"""Forward/backward passes of the dense MLP core and the finite-difference checker."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqgb.diffcore import (MlpSpec, NumericError, ShapeError, TapeStateError, grad_check,
                           init_params, mlp_backward, mlp_forward, unpack)


def scalar_loop_forward(spec, params, x):
    """Independent re-evaluation with explicit loops over units."""
    h = list(map(float, x))
    pos = 0
    widths = spec.layer_widths
    for i in range(len(widths) - 1):
        n_in, n_out = widths[i], widths[i + 1]
        W = [[params[pos + r * n_in + c] for c in range(n_in)] for r in range(n_out)]
        pos += n_in * n_out
        b = [params[pos + r] for r in range(n_out)]
        pos += n_out
        out = []
        for r in range(n_out):
            a = b[r] + sum(W[r][c] * h[c] for c in range(n_in))
            act = spec.layer_activation(i)
            out.append(math.tanh(a) if act == "tanh" else max(a, 0.0) if act == "relu" else a)
        h = out
    return np.array(h)


class TestMlpSpec:
    """Layer-width validation and parameter counting."""

    def test_counts(self):
        spec = MlpSpec.build(2, [4], 3)
        assert spec.n_params == 2 * 4 + 4 + 4 * 3 + 3
        assert spec.depth == 1 and spec.n_in == 2 and spec.n_out == 3

    def test_rejects_bad_widths(self):
        with pytest.raises(ShapeError):
            MlpSpec((3,))
        with pytest.raises(ValueError):
            MlpSpec((2, 3, 1), ("sigmoidish",))


class TestForward:
    """Closed-form and independently re-evaluated forward values."""

    def test_identity_layer(self):
        spec = MlpSpec((2, 2))
        params = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        np.testing.assert_array_equal(mlp_forward(spec, params, np.array([1.0, 2.0])), [1.0, 2.0])

    def test_zero_weights_give_bias(self):
        spec = MlpSpec((3, 2))
        params = np.zeros(spec.n_params)
        params[-2:] = [0.3, -0.7]
        x = np.random.default_rng(1).standard_normal(3)
        np.testing.assert_array_equal(mlp_forward(spec, params, x), [0.3, -0.7])

    def test_matches_scalar_loop(self):
        spec = MlpSpec.build(2, [4], 3, "tanh")
        rng = np.random.default_rng(7)
        params = rng.standard_normal(spec.n_params)
        x = rng.standard_normal(2)
        np.testing.assert_allclose(mlp_forward(spec, params, x),
                                   scalar_loop_forward(spec, params, x), rtol=1e-13)

    def test_batch_equals_rows(self):
        spec = MlpSpec.build(3, [5, 5], 2, "relu")
        rng = np.random.default_rng(3)
        params = init_params(spec, rng)
        X = rng.standard_normal((6, 3))
        batch = mlp_forward(spec, params, X)
        for i in range(6):
            np.testing.assert_allclose(batch[i], mlp_forward(spec, params, X[i]), rtol=1e-14)

    def test_shape_error(self):
        spec = MlpSpec.build(3, [2], 1)
        with pytest.raises(ShapeError):
            mlp_forward(spec, np.zeros(spec.n_params), np.zeros(4))


class TestBackward:
    """Input and parameter gradients against closed forms and finite differences."""

    def test_linear_input_gradient(self):
        spec = MlpSpec((3, 2))
        rng = np.random.default_rng(0)
        params = rng.standard_normal(spec.n_params)
        W, _ = unpack(spec, params)[0]
        up = rng.standard_normal(2)
        _, tape = mlp_forward(spec, params, rng.standard_normal(3), record=True)
        _, gx = mlp_backward(tape, up)
        np.testing.assert_allclose(gx, W.T @ up, rtol=1e-14)

    def test_constant_network_zero_gradients(self):
        spec = MlpSpec.build(2, [3], 1)
        _, tape = mlp_forward(spec, np.zeros(spec.n_params), np.ones(2), record=True)
        gp, gx = mlp_backward(tape, np.ones(1))
        # only the output bias gradient survives
        assert np.count_nonzero(gp) == 1 and gp[-1] == 1.0
        np.testing.assert_array_equal(gx, 0.0)

    @pytest.mark.parametrize("act", ["tanh", "relu", "identity"])
    def test_finite_differences(self, act):
        spec = MlpSpec.build(3, [4, 4], 2, act)
        rng = np.random.default_rng(11)
        p0 = rng.standard_normal(spec.n_params)
        x = rng.standard_normal((5, 3))
        up = rng.standard_normal((5, 2))

        def f(p):
            y, tape = mlp_forward(spec, p, x, record=True)
            return float((y * up).sum()), mlp_backward(tape, up)[0]

        assert grad_check(f, p0) <= 1e-4

    def test_tape_is_one_shot(self):
        spec = MlpSpec.build(2, [2], 1)
        _, tape = mlp_forward(spec, np.ones(spec.n_params), np.ones(2), record=True)
        mlp_backward(tape, np.ones(1))
        with pytest.raises(TapeStateError):
            mlp_backward(tape, np.ones(1))


class TestGradCheck:
    """The checker itself on functions with known gradients."""

    def test_quadratic(self):
        pt = np.random.default_rng(2).standard_normal(10)
        assert grad_check(lambda p: (float(p @ p), 2 * p), pt) <= 1e-8

    def test_constant(self):
        assert grad_check(lambda p: (3.0, np.zeros_like(p)), np.ones(4)) == 0.0

    def test_detects_wrong_gradient(self):
        assert grad_check(lambda p: (float(p @ p), p), np.ones(3)) > 0.1

    def test_non_finite(self):
        with pytest.raises(NumericError):
            grad_check(lambda p: (float("nan"), p), np.ones(2))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=6))
    def test_quadratic_property(self, xs):
        pt = np.array(xs)
        assert grad_check(lambda p: (float((p ** 2).sum()), 2 * p), pt) <= 1e-6
