"""Tests for sparse gradients, Adam updates and gradient checking."""

import numpy as np
import pytest

from speech_linker.optim import (
    AdamConfig,
    AdamState,
    OptimizerError,
    SparseRows,
    add_gradients,
    grad_check,
    optimizer_step,
    scale_gradients,
    sum_sparse,
)


def make_sparse(rows, values):
    return SparseRows(np.array(rows, dtype=np.int64), np.array(values, dtype=np.float64))


class TestSparseRows:
    """Tests for SparseRows helpers."""

    def test_sum_merges_duplicates(self):
        """Test that duplicate rows are summed and sorted."""
        total = sum_sparse([
            make_sparse([3, 1], [[1.0, 1.0], [2.0, 2.0]]),
            make_sparse([1], [[0.5, 0.5]]),
        ], width=2)

        np.testing.assert_array_equal(total.rows, [1, 3])
        np.testing.assert_allclose(total.values, [[2.5, 2.5], [1.0, 1.0]])

    def test_sum_of_nothing(self):
        """Test that summing no pieces gives an empty gradient."""
        total = sum_sparse([], width=3)

        assert total.is_empty
        assert total.values.shape == (0, 3)

    def test_add_and_scale(self):
        """Test accumulation of mixed dense and sparse gradients."""
        a = {"w": np.ones(2), "e": make_sparse([0], [[1.0]])}
        b = {"w": np.ones(2), "e": make_sparse([0, 2], [[1.0], [3.0]])}

        total = scale_gradients(add_gradients(a, b), 0.5)

        np.testing.assert_allclose(total["w"], [1.0, 1.0])
        np.testing.assert_allclose(total["e"].to_dense((3, 1)).ravel(), [1.0, 0.0, 1.5])
        np.testing.assert_allclose(a["w"], [1.0, 1.0])


class TestOptimizerStep:
    """Tests for optimizer_step."""

    def test_first_step_moves_by_lr(self):
        """Test that the first Adam step moves each coordinate by about lr."""
        params = {"w": np.array([1.0, -1.0])}
        grads = {"w": np.array([0.3, -2.0])}

        optimizer_step(params, grads, AdamState(), AdamConfig(lr=0.1))

        np.testing.assert_allclose(params["w"], [0.9, -0.9], atol=1e-6)

    def test_sparse_matches_dense_on_touched_rows(self):
        """Test that sparse and dense updates agree and untouched rows stay put."""
        table = np.arange(8.0).reshape(4, 2)
        dense_params = {"e": table.copy()}
        sparse_params = {"e": table.copy()}
        grad = np.zeros((4, 2))
        grad[[1, 3]] = [[0.5, -0.2], [1.0, 2.0]]
        cfg = AdamConfig(lr=0.05)
        dense_state, sparse_state = AdamState(), AdamState()

        for _ in range(3):
            optimizer_step(dense_params, {"e": grad}, dense_state, cfg)
            optimizer_step(sparse_params, {"e": make_sparse([1, 3], grad[[1, 3]])}, sparse_state, cfg)

        np.testing.assert_allclose(sparse_params["e"], dense_params["e"])
        np.testing.assert_array_equal(sparse_params["e"][[0, 2]], table[[0, 2]])

    def test_updates_in_place(self):
        """Test that the caller's arrays are modified."""
        w = np.zeros(3)

        optimizer_step({"w": w}, {"w": np.ones(3)}, AdamState())

        assert np.all(w < 0)

    def test_nan_gradient_names_parameter(self):
        """Test that a NaN gradient is reported with its name and count."""
        params = {"w": np.zeros(3)}
        state = AdamState()

        with pytest.raises(OptimizerError) as exc_info:
            optimizer_step(params, {"w": np.array([0.0, np.nan, np.inf])}, state)

        message = str(exc_info.value)
        assert "'w'" in message
        assert "2 of 3" in message
        assert state.step == 0
        np.testing.assert_array_equal(params["w"], np.zeros(3))

    def test_unknown_parameter(self):
        """Test that gradients for unknown names are rejected."""
        with pytest.raises(OptimizerError):
            optimizer_step({"w": np.zeros(1)}, {"v": np.zeros(1)}, AdamState())

    def test_shape_mismatch(self):
        """Test that mismatched shapes are rejected."""
        with pytest.raises(OptimizerError):
            optimizer_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


class TestGradCheck:
    """Tests for grad_check."""

    def test_correct_gradient_passes(self):
        """Test a quadratic with its exact gradient."""
        a = np.array([[2.0, 0.5], [0.5, 1.0]])

        def loss_fn(theta):
            return float(0.5 * theta @ a @ theta), a @ theta

        report = grad_check(loss_fn, np.array([0.3, -1.2]))

        assert report.passed
        assert report.checked == 2

    def test_wrong_gradient_fails(self):
        """Test that a wrong gradient is detected at the right coordinate."""
        def loss_fn(theta):
            grad = 2 * theta
            grad[1] += 1.0
            return float(theta @ theta), grad

        report = grad_check(loss_fn, np.array([1.0, 2.0, 3.0]))

        assert not report.passed
        assert report.worst_index == 1
        assert "FAILED" in str(report)

    def test_subset_of_coordinates(self):
        """Test that num_coords limits the checked coordinates."""
        report = grad_check(lambda t: (float(t @ t), 2 * t), np.ones(50), num_coords=10)

        assert report.checked == 10
