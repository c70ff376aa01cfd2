import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentvi.diffnet import (
    LOGVAR_CLAMP,
    MlpParams,
    MlpSpec,
    clamp_logvar,
    forward_and_grad,
    init_params,
    mlp_forward,
    mlp_grad,
)
from latentvi.errors import DimensionError, DomainError
from latentvi.numkit import RngStream, finite_diff_grad

from conftest import assert_rel


class TestSpec:
    def test_param_count(self):
        spec = MlpSpec((3, 5, 2))
        assert spec.n_params == (3 + 1) * 5 + (5 + 1) * 2

    def test_heads_must_sum(self):
        with pytest.raises(DomainError):
            MlpSpec((2, 4), heads=(1, 2))

    def test_split_heads(self):
        spec = MlpSpec((2, 3), heads=(1, 2))
        a, b = spec.split_heads(np.arange(3.0))
        np.testing.assert_array_equal(a, [0.0])
        np.testing.assert_array_equal(b, [1.0, 2.0])

    def test_needs_a_layer(self):
        with pytest.raises(DomainError):
            MlpSpec((3,))

    def test_unknown_activation(self):
        with pytest.raises(DomainError):
            MlpSpec((2, 2), activation="relu6")

    def test_wrong_flat_length(self):
        with pytest.raises(DimensionError):
            MlpParams(MlpSpec((2, 2)), np.zeros(5))


class TestInit:
    def test_same_seed_same_params(self):
        spec = MlpSpec((3, 4, 2))
        np.testing.assert_array_equal(init_params(spec, RngStream(1)).flat, init_params(spec, RngStream(1)).flat)

    def test_biases_zero(self):
        p = init_params(MlpSpec((3, 4, 2)), RngStream(2))
        for _, b in p.layers():
            np.testing.assert_array_equal(b, 0.0)

    def test_weight_variance(self):
        spec = MlpSpec((100, 100))
        w = next(init_params(spec, RngStream(3)).layers())[0].ravel()
        np.testing.assert_allclose(w.var(), 2.0 / 200, rtol=0.1)


class TestForward:
    def test_zero_params_zero_output(self):
        spec = MlpSpec((3, 4, 2))
        np.testing.assert_array_equal(mlp_forward(MlpParams(spec, np.zeros(spec.n_params)), np.ones(3)), np.zeros(2))

    def test_identity_layer(self):
        spec = MlpSpec((3, 3))
        p = MlpParams(spec, np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
        x = np.array([0.2, -1.0, 4.0])
        np.testing.assert_array_equal(mlp_forward(p, x), x)

    def test_hand_computed_2_2_1(self):
        # hidden = tanh(W1 x + b1), out = w2 . hidden + b2
        W1 = np.array([[1.0, -1.0], [0.5, 2.0]])
        b1 = np.array([0.1, -0.2])
        w2 = np.array([[3.0, -1.0]])
        b2 = np.array([0.5])
        spec = MlpSpec((2, 2, 1))
        p = MlpParams(spec, np.concatenate([W1.ravel(), b1, w2.ravel(), b2]))
        x = np.array([0.3, 0.7])
        h = np.tanh(np.array([0.3 - 0.7 + 0.1, 0.15 + 1.4 - 0.2]))
        np.testing.assert_allclose(mlp_forward(p, x), [3 * h[0] - h[1] + 0.5], rtol=1e-14)

    def test_batch_matches_rows(self):
        p = init_params(MlpSpec((3, 4, 2), "softplus"), RngStream(4))
        X = RngStream(5).normal((6, 3))
        batch = mlp_forward(p, X)
        for i in range(6):
            np.testing.assert_allclose(batch[i], mlp_forward(p, X[i]), rtol=1e-14)

    def test_dimension_mismatch(self):
        p = init_params(MlpSpec((3, 2)), RngStream(6))
        with pytest.raises(DimensionError):
            mlp_forward(p, np.zeros(4))

    def test_linear_layer_homogeneous(self):
        spec = MlpSpec((3, 2))
        p = init_params(spec, RngStream(7))
        x = RngStream(8).normal(3)
        scaled = MlpParams(spec, 2.5 * p.flat)
        np.testing.assert_allclose(mlp_forward(scaled, x), 2.5 * mlp_forward(p, x), rtol=1e-14)


class TestGradients:
    def test_linear_input_grad_is_wt_c(self):
        spec = MlpSpec((3, 2))
        p = init_params(spec, RngStream(9))
        W = next(p.layers())[0]
        c = np.array([1.0, -2.0])
        _, gx = mlp_grad(p, np.ones(3), c)
        np.testing.assert_allclose(gx, W.T @ c, rtol=1e-14)

    def test_zero_cotangent(self):
        p = init_params(MlpSpec((3, 5, 2)), RngStream(10))
        gp, gx = mlp_grad(p, np.ones(3), np.zeros(2))
        np.testing.assert_array_equal(gp, 0.0)
        np.testing.assert_array_equal(gx, 0.0)

    def test_cotangent_shape_checked(self):
        p = init_params(MlpSpec((3, 2)), RngStream(11))
        with pytest.raises(DimensionError):
            mlp_grad(p, np.ones(3), np.ones(3))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), act=st.sampled_from(["tanh", "softplus"]))
    def test_finite_difference_3_5_2(self, seed, act):
        r = RngStream(seed)
        spec = MlpSpec((3, 5, 2), act)
        p = init_params(spec, r.spawn(0))
        p = MlpParams(spec, p.flat + 0.1 * r.spawn(3).normal(spec.n_params))
        x, c = r.spawn(1).normal(3), r.spawn(2).normal(2)
        gp, gx = mlp_grad(p, x, c)
        assert_rel(gp, finite_diff_grad(lambda f: mlp_forward(MlpParams(spec, f), x) @ c, p.flat), 1e-4)
        assert_rel(gx, finite_diff_grad(lambda v: mlp_forward(p, v) @ c, x), 1e-4)

    def test_batched_param_grad_is_sum(self):
        p = init_params(MlpSpec((2, 3, 2)), RngStream(12))
        X = RngStream(13).normal((4, 2))
        C = RngStream(14).normal((4, 2))
        total, gx = mlp_grad(p, X, C)
        rows = sum(mlp_grad(p, X[i], C[i])[0] for i in range(4))
        np.testing.assert_allclose(total, rows, rtol=1e-12)
        np.testing.assert_allclose(gx[2], mlp_grad(p, X[2], C[2])[1], rtol=1e-12)

    def test_forward_and_grad_matches_two_pass(self):
        p = init_params(MlpSpec((2, 3, 2)), RngStream(15))
        X = RngStream(16).normal((4, 2))
        out, g, gx = forward_and_grad(p, X, lambda o: 2.0 * o)
        g2, gx2 = mlp_grad(p, X, 2.0 * mlp_forward(p, X))
        np.testing.assert_allclose(out, mlp_forward(p, X))
        np.testing.assert_allclose(g, g2)
        np.testing.assert_allclose(gx, gx2)

    def test_every_parameter_is_used(self):
        spec = MlpSpec((3, 4, 2))
        p = init_params(spec, RngStream(17))
        p = MlpParams(spec, p.flat + 0.1)
        X = RngStream(18).normal((8, 3))
        touched = np.zeros(spec.n_params, dtype=bool)
        for j in range(2):
            c = np.zeros((8, 2))
            c[:, j] = 1.0
            g, _ = mlp_grad(p, X, c)
            touched |= g != 0
        assert touched.all()


class TestClamp:
    def test_clamp_bounds_and_mask(self):
        raw = np.array([-20.0, 0.0, 10.0, 30.0])
        s, free = clamp_logvar(raw)
        np.testing.assert_array_equal(s, [LOGVAR_CLAMP[0], 0.0, 10.0, LOGVAR_CLAMP[1]])
        np.testing.assert_array_equal(free, [False, True, False, False])
