"""Tests for the active-set projection, the penalized update and the oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st


def _parity_box(mask, eps, lower, upper):
    from fairlayer.constraints import GroupMasks, box, compile, mean_parity

    masks = GroupMasks({"x1": np.asarray(mask)})
    return compile([mean_parity("x1", eps), box(lower, upper)], masks, None, len(mask))


class TestProject:
    def test_two_point_parity(self):
        from fairlayer.constraints import build_mean_parity
        from fairlayer.projection import project

        C = build_mean_parity(np.array([0, 1]), 0.4)
        result = project(np.array([1.0, 0.0]), C)
        np.testing.assert_allclose(result.y_star, [0.7, 0.3], atol=1e-10)
        np.testing.assert_allclose(result.lam, [0.3, 0.0], atol=1e-10)
        assert list(result.diff_active) == [0]
        assert result.strict_complementarity

    def test_box_clips(self):
        from fairlayer.constraints import build_box
        from fairlayer.projection import project

        result = project(np.array([2.0, -3.0, 0.5]), build_box(0.0, 1.0, 3))
        np.testing.assert_allclose(result.y_star, [1.0, 0.0, 0.5], atol=1e-12)
        # upper[0] and lower[1] carry the multipliers
        np.testing.assert_allclose(result.lam[[0, 4]], [1.0, 3.0], atol=1e-10)

    def test_iteration_budget(self):
        from fairlayer.constraints import build_box
        from fairlayer.projection import MaxIterations, SolverConfig, project

        with pytest.raises(MaxIterations):
            project(np.array([2.0, -3.0, 0.5]), build_box(0.0, 1.0, 3), SolverConfig(max_iterations=1))

    def test_equality(self):
        from fairlayer.constraints import ConstraintSet
        from fairlayer.projection import project

        C = ConstraintSet(np.zeros((0, 2)), np.zeros(0), np.array([[1.0, 1.0]]), np.array([1.0]))
        result = project(np.zeros(2), C)
        np.testing.assert_allclose(result.y_star, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(result.nu, [-0.5], atol=1e-12)

    def test_feasible_input_unchanged(self):
        from fairlayer.projection import project

        C = _parity_box([0, 0, 1, 1], 0.5, -1.0, 1.0)
        z = np.array([0.1, 0.2, 0.0, 0.1])
        result = project(z, C)
        np.testing.assert_array_equal(result.y_star, z)
        assert not np.any(result.lam)

    @pytest.mark.parametrize("seed", range(5))
    def test_idempotent(self, seed):
        from fairlayer.projection import project

        C = _parity_box([0, 1, 1, 0, 1, 0], 0.05, -0.5, 0.5)
        z = np.random.default_rng(seed).normal(scale=2.0, size=6)
        once = project(z, C).y_star
        twice = project(once, C)
        np.testing.assert_allclose(twice.y_star, once, atol=1e-9)
        assert twice.primal_residual <= 1e-9

    def test_empty_set_is_identity(self):
        from fairlayer.constraints import ConstraintSet
        from fairlayer.projection import project

        z = np.array([3.0, -1.0])
        np.testing.assert_array_equal(project(z, ConstraintSet.empty(2)).y_star, z)

    def test_infeasible(self):
        from fairlayer.constraints import ConstraintSet
        from fairlayer.projection import Infeasible, project

        # y <= 0 and y >= 1
        C = ConstraintSet(np.array([[1.0], [-1.0]]), np.array([0.0, -1.0]), np.zeros((0, 1)), np.zeros(0))
        with pytest.raises(Infeasible):
            project(np.array([5.0]), C)

    def test_dimension_mismatch(self):
        from fairlayer.constraints import DimensionMismatch, build_box
        from fairlayer.projection import project

        with pytest.raises(DimensionMismatch):
            project(np.zeros(3), build_box(0, 1, 2))

    def test_kkt_residuals(self):
        from fairlayer.projection import project

        C = _parity_box([0, 1, 0, 1], 0.05, 0.0, 1.0)
        result = project(np.array([1.4, -0.3, 0.9, 0.2]), C)
        assert result.primal_residual <= 1e-9
        assert result.stationarity_residual <= 1e-9
        assert np.all(result.lam >= 0)

    def test_warm_start_reaches_same_point(self):
        from fairlayer.projection import project

        C = _parity_box([0, 1, 0, 1], 0.05, 0.0, 1.0)
        z = np.array([1.4, -0.3, 0.9, 0.2])
        cold = project(z, C)
        warm = project(z, C, warm_start=cold.working)
        np.testing.assert_allclose(warm.y_star, cold.y_star, atol=1e-10)
        assert warm.iterations <= cold.iterations


class TestOracleAgreement:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_exhaustive_solver(self, seed):
        from fairlayer.projection import project, project_oracle

        rng = np.random.default_rng(seed)
        C = _parity_box([0, 1, 1, 0], 0.1, -0.5, 0.5)
        z = rng.normal(scale=2.0, size=4)
        np.testing.assert_allclose(project(z, C).y_star, project_oracle(z, C), atol=1e-8)

    def test_oracle_budget(self):
        from fairlayer.constraints import build_box
        from fairlayer.projection import TooManyConstraints, project_oracle

        with pytest.raises(TooManyConstraints):
            project_oracle(np.zeros(7), build_box(0, 1, 7))


class TestNonexpansive:
    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-5, 5), min_size=4, max_size=4),
        st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    )
    def test_distance_does_not_grow(self, z1, z2):
        from fairlayer.projection import project

        C = _parity_box([0, 0, 1, 1], 0.1, -1.0, 1.0)
        z1, z2 = np.array(z1), np.array(z2)
        p1, p2 = project(z1, C).y_star, project(z2, C).y_star
        assert np.linalg.norm(p1 - p2) <= np.linalg.norm(z1 - z2) + 1e-9


class TestFeasibilityCheck:
    def test_box_midpoint_witness(self):
        from fairlayer.constraints import build_box
        from fairlayer.projection import feasibility_check

        result = feasibility_check(build_box(2.0, 4.0, 3))
        assert result.feasible
        np.testing.assert_allclose(result.witness, [3.0, 3.0, 3.0])
        assert result.margin == pytest.approx(1.0)

    def test_empty_intersection(self):
        from fairlayer.constraints import ConstraintSet
        from fairlayer.projection import feasibility_check

        C = ConstraintSet(np.array([[1.0], [-1.0]]), np.array([0.0, -1.0]), np.zeros((0, 1)), np.zeros(0))
        assert not feasibility_check(C).feasible


class TestProjectPenalized:
    def test_single_direction_soft_threshold(self):
        from fairlayer.projection import project_penalized

        y = project_penalized(np.array([1.0, 0.0]), 0.2, np.array([1.0, -1.0]))
        np.testing.assert_allclose(y, [0.9, 0.1], atol=1e-12)

    def test_large_kappa_closes_gap(self):
        from fairlayer.projection import project_penalized

        y = project_penalized(np.array([1.0, 0.0]), 5.0, np.array([1.0, -1.0]))
        np.testing.assert_allclose(y, [0.5, 0.5], atol=1e-12)

    def test_zero_kappa_identity(self):
        from fairlayer.projection import project_penalized

        z = np.array([1.0, 0.0])
        np.testing.assert_array_equal(project_penalized(z, 0.0, np.array([1.0, -1.0])), z)

    def test_several_directions(self):
        from fairlayer.projection import project_penalized

        G = np.array([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]])
        y = project_penalized(np.array([1.0, 0.0, 2.0, 0.0]), 0.2, G)
        np.testing.assert_allclose(y, [0.9, 0.1, 1.9, 0.1], atol=1e-6)

    def test_zero_direction(self):
        from fairlayer.projection import ZeroDirection, project_penalized

        with pytest.raises(ZeroDirection):
            project_penalized(np.zeros(2), 1.0, np.zeros(2))


class TestSolverConfig:
    def test_rejects_other_objectives(self):
        from fairlayer.projection import SolverConfig

        with pytest.raises(ValueError):
            SolverConfig(strong_convexity=2.0)

    def test_rejects_nonpositive_tolerance(self):
        from fairlayer.projection import SolverConfig

        with pytest.raises(ValueError):
            SolverConfig(active_tol=0.0)
