"""Tests for KKT differentiation of the projection layer."""

import numpy as np
import pytest


def _two_point():
    from fairlayer.constraints import build_mean_parity
    from fairlayer.projection import project

    C = build_mean_parity(np.array([0, 1]), 0.4)
    return C, project(np.array([1.0, 0.0]), C)


class TestJacobian:
    def test_jvp_on_parity_face(self):
        from fairlayer.backprop import jvp

        C, result = _two_point()
        np.testing.assert_allclose(jvp(result, C, np.array([1.0, 0.0])), [0.5, 0.5], atol=1e-12)
        # along the gap direction the output does not move
        np.testing.assert_allclose(jvp(result, C, np.array([1.0, -1.0])), [0.0, 0.0], atol=1e-12)

    def test_vjp_is_transpose(self):
        from fairlayer.backprop import build_jacobian

        C, result = _two_point()
        J = build_jacobian(result, C)
        rng = np.random.default_rng(0)
        u, v = rng.standard_normal(2), rng.standard_normal(2)
        assert v @ J.jvp(u) == pytest.approx(J.vjp(v) @ u, abs=1e-12)

    def test_region_projector_reproduces_output(self):
        from fairlayer.backprop import region_projector

        C, result = _two_point()
        P, c = region_projector(result, C)
        np.testing.assert_allclose(P, [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)
        np.testing.assert_allclose(c, [0.2, -0.2], atol=1e-12)
        np.testing.assert_allclose(P @ np.array([1.0, 0.0]) + c, result.y_star, atol=1e-10)

    def test_interior_point_is_identity(self):
        from fairlayer.backprop import build_jacobian
        from fairlayer.constraints import build_box
        from fairlayer.projection import project

        C = build_box(-1.0, 1.0, 3)
        result = project(np.array([0.1, 0.2, 0.3]), C)
        J = build_jacobian(result, C)
        dz = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(J.jvp(dz), dz)
        np.testing.assert_array_equal(J.projector[0], np.eye(3))

    def test_clipped_coordinates_have_zero_gradient(self):
        from fairlayer.backprop import vjp
        from fairlayer.constraints import build_box
        from fairlayer.projection import project

        C = build_box(0.0, 1.0, 3)
        result = project(np.array([2.0, 0.5, -1.0]), C)
        np.testing.assert_allclose(vjp(result, C, np.ones(3)), [0.0, 1.0, 0.0], atol=1e-12)

    def test_matches_finite_differences(self):
        from fairlayer.backprop import finite_difference_jvp, jvp
        from fairlayer.constraints import GroupMasks, box, compile, mean_parity
        from fairlayer.projection import project

        masks = GroupMasks({"x1": np.array([0, 1, 0, 1, 1])})
        C = compile([mean_parity("x1", 0.05), box(-1.0, 1.0)], masks, None, 5)
        z = np.array([0.9, -0.2, 0.4, 0.1, 0.3])
        dz = np.array([0.3, -0.1, 0.2, 0.5, -0.4])
        fd, same = finite_difference_jvp(z, C, dz)
        assert same
        np.testing.assert_allclose(jvp(project(z, C), C, dz), fd, atol=1e-6)

    def test_dependent_rows_are_regularized(self):
        from fairlayer.backprop import build_jacobian
        from fairlayer.constraints import ConstraintSet
        from fairlayer.projection import ProjectionResult, SolverConfig

        C = ConstraintSet(np.array([[1.0, 1.0], [2.0, 2.0]]), np.zeros(2), np.zeros((0, 2)), np.zeros(0))
        result = ProjectionResult(
            y_star=np.array([0.5, -0.5]),
            lam=np.array([0.5, 0.5]),
            nu=np.zeros(0),
            active=np.array([0, 1]),
            working=np.array([0, 1]),
            weakly_active=np.zeros(0, dtype=int),
            strict_complementarity=True,
            stationarity_residual=0.0,
            primal_residual=0.0,
            iterations=1,
        )
        J = build_jacobian(result, C, SolverConfig(ridge=1e-6))
        assert J.regularized
        np.testing.assert_allclose(J.jvp(np.array([1.0, 0.0])), [0.5, -0.5], atol=1e-4)


class TestSpectral:
    def test_projector_passes(self):
        from fairlayer.backprop import region_projector, spectral_diagnostics

        C, result = _two_point()
        P, _ = region_projector(result, C)
        report = spectral_diagnostics(P, C.A[result.diff_active])
        assert report.passed
        np.testing.assert_allclose(sorted(report.eigenvalues), [0.0, 1.0], atol=1e-12)

    def test_non_projector_raises(self):
        from fairlayer.backprop import SpectrumViolation, spectral_diagnostics

        with pytest.raises(SpectrumViolation):
            spectral_diagnostics(0.5 * np.eye(3))

    def test_report_without_raising(self):
        from fairlayer.backprop import spectral_diagnostics

        report = spectral_diagnostics(0.5 * np.eye(3), raise_on_failure=False)
        assert not report.passed
        assert report.max_distance == pytest.approx(0.5)

    def test_chain_rule_bound(self):
        from fairlayer.backprop import chain_rule_bound, region_projector

        C, result = _two_point()
        P, _ = region_projector(result, C)
        J = np.random.default_rng(3).standard_normal((2, 5))
        composed, raw = chain_rule_bound(P, J)
        assert composed <= raw + 1e-12


class TestLipschitz:
    def test_estimate_is_nonexpansive(self):
        from fairlayer.backprop import lipschitz_estimate
        from fairlayer.constraints import GroupMasks, box, compile, mean_parity

        masks = GroupMasks({"x1": np.array([0, 1, 1, 0])})
        C = compile([mean_parity("x1", 0.1), box(-0.5, 0.5)], masks, None, 4)
        assert lipschitz_estimate(C, trials=40, seed=1) <= 1.0 + 1e-9
