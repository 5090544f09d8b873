"""Unit tests for the numerical substrate: MLPs, Adam, grids and finite differences."""

from __future__ import annotations

import numpy as np
import pytest

from logic.diff_core import (
    AdamState,
    FeatureGrid,
    MlpParams,
    adam_step,
    finite_difference_check,
    flatten_tree,
    grid_backward,
    grid_interpolate,
    mlp_backward,
    mlp_forward,
    unflatten_tree,
)
from models.exceptions import ContractViolationError, NonFiniteGradientError, OutOfDomainError


def _brute_force_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    a = x
    for W, b, act in zip(params.weights, params.biases, params.activations):
        z = np.array([sum(W[i, j] * a[j] for j in range(W.shape[1])) + b[i] for i in range(W.shape[0])])
        if act == "relu":
            a = np.array([max(v, 0.0) for v in z])
        elif act == "sigmoid":
            a = np.array([1.0 / (1.0 + np.exp(-v)) for v in z])
        else:
            a = z
    return a


# ============================================================================
# MLP
# ============================================================================

@pytest.mark.unit
class TestMlpForward:
    def test_zero_network_outputs_zero(self, rng):
        params = MlpParams([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)], ["relu", "none"])
        out, _ = mlp_forward(params, rng.normal(size=3))
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_identity_layer(self, rng):
        params = MlpParams([np.eye(5)], [np.zeros(5)], ["none"])
        v = rng.normal(size=5)
        out, _ = mlp_forward(params, v)
        np.testing.assert_array_equal(out, v)

    def test_matches_straight_line_evaluation(self, rng):
        params = MlpParams.initialize([5, 7, 3], ["relu", "sigmoid"], rng)
        params.biases = [rng.normal(size=7), rng.normal(size=3)]
        x = rng.normal(size=5)
        out, _ = mlp_forward(params, x)
        np.testing.assert_allclose(out, _brute_force_forward(params, x), rtol=1e-12)

    def test_batch_rows_match_single_evaluations(self, rng):
        params = MlpParams.initialize([4, 6, 2], ["relu", "none"], rng)
        x = rng.normal(size=(5, 4))
        batch, _ = mlp_forward(params, x)
        for i in range(5):
            single, _ = mlp_forward(params, x[i])
            np.testing.assert_allclose(batch[i], single, rtol=1e-12)

    def test_width_mismatch_raises(self, rng):
        params = MlpParams.initialize([4, 2], ["none"], rng)
        with pytest.raises(ContractViolationError):
            mlp_forward(params, np.zeros(3))

    def test_inconsistent_layers_rejected(self):
        with pytest.raises(ContractViolationError):
            MlpParams([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)], ["relu", "none"])


@pytest.mark.unit
class TestMlpBackward:
    def test_linear_layer_row_gradient(self, rng):
        W = rng.normal(size=(3, 4))
        params = MlpParams([W], [np.zeros(3)], ["none"])
        x = rng.normal(size=4)
        _, cache = mlp_forward(params, x)
        d_params, d_x = mlp_backward(cache, np.array([0.0, 1.0, 0.0]))
        np.testing.assert_array_equal(d_params.weights[0][1], x)
        np.testing.assert_array_equal(d_params.weights[0][[0, 2]], np.zeros((2, 4)))
        np.testing.assert_allclose(d_x, W[1])

    def test_sigmoid_derivative_at_zero(self):
        params = MlpParams([np.zeros((1, 2))], [np.zeros(1)], ["sigmoid"])
        _, cache = mlp_forward(params, np.array([1.0, -2.0]))
        d_params, _ = mlp_backward(cache, np.array([1.0]))
        assert d_params.biases[0][0] == pytest.approx(0.25)

    def test_matches_finite_differences(self, rng):
        params = MlpParams.initialize([4, 6, 2], ["relu", "sigmoid"], rng)
        x = rng.normal(size=(3, 4))
        weights = rng.normal(size=(3, 2))
        _, cache = mlp_forward(params, x)
        d_params, d_x = mlp_backward(cache, weights)

        tree = params.to_tree("m")
        keys = sorted(tree)

        def f(flat):
            p = MlpParams.from_tree(unflatten_tree(flat, tree, keys), "m", params.activations)
            return float(np.sum(weights * mlp_forward(p, x)[0]))

        report = finite_difference_check(f, flatten_tree(tree, keys), flatten_tree(d_params.to_tree("m"), keys))
        assert report.max_rel_error <= 1e-6

        report = finite_difference_check(
            lambda v: float(np.sum(weights * mlp_forward(params, v.reshape(3, 4))[0])), x.ravel(), d_x.ravel()
        )
        assert report.max_rel_error <= 1e-6

    def test_foreign_cache_rejected(self):
        with pytest.raises(ContractViolationError):
            mlp_backward(object(), np.zeros(1))

    def test_params_changed_after_forward_rejected(self, rng):
        params = MlpParams.initialize([4, 6, 1], ["relu", "none"], rng)
        _, cache = mlp_forward(params, rng.normal(size=4))
        params.weights[0][0, 0] += 1.0
        with pytest.raises(ContractViolationError, match="stale"):
            mlp_backward(cache, np.array([1.0]))

    def test_fresh_forward_after_change_accepted(self, rng):
        params = MlpParams.initialize([4, 6, 1], ["relu", "none"], rng)
        x = rng.normal(size=4)
        mlp_forward(params, x)
        params.biases[1][0] = 2.0
        _, cache = mlp_forward(params, x)
        d_params, _ = mlp_backward(cache, np.array([1.0]))
        assert d_params.biases[1][0] == 1.0


# ============================================================================
# Adam
# ============================================================================

@pytest.mark.unit
class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"x": np.array([1.0, 2.0])}
        state = AdamState.for_params(params, lr=0.1)
        new, state = adam_step(state, params, {"x": np.zeros(2)})
        np.testing.assert_array_equal(new["x"], params["x"])
        assert state.t == 1

    def test_first_step_moves_by_lr(self):
        params = {"x": np.array([0.0])}
        state = AdamState.for_params(params, lr=0.01)
        new, _ = adam_step(state, params, {"x": np.array([3.7])})
        assert new["x"][0] == pytest.approx(-0.01, rel=1e-6)

    def test_minimizes_quadratic(self):
        params = {"x": np.array([0.0])}
        state = AdamState.for_params(params, lr=0.1)
        for _ in range(100):
            params, state = adam_step(state, params, {"x": 2.0 * (params["x"] - 3.0)})
        assert abs(params["x"][0] - 3.0) < 0.5

    def test_inputs_not_mutated(self):
        params = {"x": np.array([1.0])}
        state = AdamState.for_params(params, lr=0.1)
        adam_step(state, params, {"x": np.array([1.0])})
        assert params["x"][0] == 1.0
        assert state.t == 0

    def test_non_finite_gradient_raises(self):
        params = {"x": np.array([1.0])}
        with pytest.raises(NonFiniteGradientError):
            adam_step(AdamState.for_params(params, lr=0.1), params, {"x": np.array([np.nan])})

    def test_shape_mismatch_raises(self):
        params = {"x": np.array([1.0])}
        with pytest.raises(ContractViolationError):
            adam_step(AdamState.for_params(params, lr=0.1), params, {"x": np.zeros(2)})


# ============================================================================
# Feature grid
# ============================================================================

@pytest.mark.unit
class TestGridInterpolate:
    @pytest.fixture
    def grid(self, rng) -> FeatureGrid:
        return FeatureGrid(rng.normal(size=(4, 5, 3, 2)), np.array([0.0, 0.0, 0.0]), np.array([3.0, 4.0, 2.0]))

    def test_vertex_returns_vertex_feature(self, grid):
        sample = grid_interpolate(grid, np.array([1.0, 2.0, 1.0]))
        np.testing.assert_allclose(sample.features, grid.values[1, 2, 1], atol=1e-12)

    def test_cell_center_is_corner_mean(self, grid):
        sample = grid_interpolate(grid, np.array([1.5, 2.5, 0.5]))
        expected = grid.values[1:3, 2:4, 0:2].reshape(-1, 2).mean(axis=0)
        np.testing.assert_allclose(sample.features, expected, atol=1e-12)

    def test_matches_weight_products(self, grid, rng):
        p = rng.uniform([0, 0, 0], [3, 4, 2])
        i, j, k = np.floor(p).astype(int)
        fx, fy, fz = p - np.floor(p)
        expected = np.zeros(2)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * (fz if dz else 1 - fz)
                    expected += w * grid.values[i + dx, j + dy, k + dz]
        np.testing.assert_allclose(grid_interpolate(grid, p).features, expected, atol=1e-12)

    def test_point_jacobian_matches_finite_differences(self, grid, rng):
        p = rng.uniform([0.2, 0.2, 0.2], [2.8, 3.8, 1.8])
        c = rng.normal(size=2)
        sample = grid_interpolate(grid, p)
        report = finite_difference_check(
            lambda q: float(c @ grid_interpolate(grid, q).features), p, c @ sample.d_point
        )
        assert report.max_rel_error <= 1e-6

    def test_grid_backward_scatters_weights(self, grid, rng):
        points = rng.uniform([0, 0, 0], [3, 4, 2], size=(6, 3))
        c = rng.normal(size=(6, 2))
        sample = grid_interpolate(grid, points)
        analytic = grid_backward(grid, sample, c)

        def f(flat):
            g = FeatureGrid(flat.reshape(grid.values.shape), grid.box_min, grid.box_max)
            return float(np.sum(c * grid_interpolate(g, points).features))

        report = finite_difference_check(f, grid.values.ravel(), analytic.ravel())
        assert report.max_rel_error <= 1e-6

    def test_outside_point_raises(self, grid):
        with pytest.raises(OutOfDomainError):
            grid_interpolate(grid, np.array([3.1, 0.0, 0.0]))


# ============================================================================
# Finite differences
# ============================================================================

@pytest.mark.unit
class TestFiniteDifferenceCheck:
    def test_quadratic_is_exact(self):
        report = finite_difference_check(lambda x: float(x[0] ** 2), np.array([2.0]), np.array([4.0]))
        assert report.max_rel_error < 1e-9
        assert report.passed()

    def test_doubled_gradient_reports_half(self):
        report = finite_difference_check(lambda x: float(x[0] ** 2), np.array([2.0]), np.array([8.0]))
        assert report.max_rel_error == pytest.approx(0.5, abs=1e-6)
        assert not report.passed()

    def test_rejects_non_positive_step(self):
        with pytest.raises(ContractViolationError):
            finite_difference_check(lambda x: 0.0, np.zeros(1), np.zeros(1), h=0.0)
