"""Exact derivatives of the projection layer.

Linearizing the KKT conditions at ``(y*, lambda*, nu*)`` with the active rows
``M = [A_A; B]`` gives the block system

    [ I   M^T ] [ dy  ]   [ dz ]
    [ M   0   ] [ dmu ] = [ 0  ]

whose solution is the Jacobian-vector product; the vector-Jacobian product
solves the transposed system. Inside one affine region the Jacobian equals the
orthogonal projector ``P_I = I - M^T (M M^T)^+ M`` and the layer is
``g(z) = P_I z + c_I``.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
from scipy import linalg as sla

from fairlayer.constraints import ConstraintSet, FairLayerError
from fairlayer.projection import ProjectionResult, SolverConfig, gram_solve, project

log = logging.getLogger(__name__)


class SingularKKT(FairLayerError):
    """Raised when the KKT block system cannot be solved even with a ridge."""


class SingularGram(FairLayerError):
    """Raised when the active-row Gram matrix cannot be inverted."""


class SpectrumViolation(FairLayerError):
    """Raised when a region projector is not an orthogonal projector."""


@dataclass
class LayerJacobian:
    """Factorized KKT system for one projection result."""

    n: int
    M: np.ndarray
    rhs: np.ndarray
    n_active: int
    lu: Tuple[np.ndarray, np.ndarray] = field(repr=False)
    regularized: bool = False
    ridge: float = 1e-12

    def _solve(self, top: np.ndarray, trans: int) -> np.ndarray:
        if self.M.shape[0] == 0:
            return np.array(top, dtype=float)
        rhs = np.concatenate([top, np.zeros(self.M.shape[0])])
        sol = sla.lu_solve(self.lu, rhs, trans=trans)
        if not np.all(np.isfinite(sol)):
            raise SingularKKT("KKT solve produced non-finite values")
        return sol[: self.n]

    def jvp(self, dz: np.ndarray) -> np.ndarray:
        return self._solve(np.asarray(dz, dtype=float), trans=0)

    def vjp(self, v_bar: np.ndarray) -> np.ndarray:
        return self._solve(np.asarray(v_bar, dtype=float), trans=1)

    @property
    def active_rows(self) -> np.ndarray:
        return self.M[: self.n_active]

    @cached_property
    def projector(self) -> Tuple[np.ndarray, np.ndarray]:
        """(P_I, c_I), materialized on first use."""
        n = self.n
        if self.M.shape[0] == 0:
            return np.eye(n), np.zeros(n)
        stacked = np.column_stack([self.M, self.rhs])
        sol, ridged = gram_solve(self.M, stacked, self.ridge)
        if ridged:
            log.debug("Region projector used a ridge-regularized Gram solve")
        if not np.all(np.isfinite(sol)):
            raise SingularGram("active-row Gram matrix is singular")
        P = np.eye(n) - self.M.T @ sol[:, :n]
        P = 0.5 * (P + P.T)
        c = self.M.T @ sol[:, n]
        return P, c


def build_jacobian(
    result: ProjectionResult, C: ConstraintSet, cfg: Optional[SolverConfig] = None,
) -> LayerJacobian:
    """Factorize the KKT block matrix on the differentiation active set.

    Weakly active rows (lambda <= tau) are left out, which picks the projector
    of the larger adjacent region at a boundary point.
    """
    cfg = cfg or SolverConfig()
    rows = result.diff_active
    M = np.vstack([C.A[rows], C.B])
    rhs = np.concatenate([C.m1[rows], C.m2])
    n, k = C.n, M.shape[0]

    K = np.zeros((n + k, n + k))
    K[:n, :n] = np.eye(n)
    K[:n, n:] = M.T
    K[n:, :n] = M
    regularized = False
    if k and np.linalg.matrix_rank(M) < k:
        # LICQ fails on the active rows
        K[n:, n:] = -cfg.ridge * np.eye(k)
        regularized = True
        log.debug("Active rows are linearly dependent, regularizing KKT block")
    lu = sla.lu_factor(K, check_finite=False) if k else (np.eye(0), np.zeros(0, dtype=int))
    return LayerJacobian(n, M, rhs, rows.size, lu, regularized, cfg.ridge)


def jvp(
    result: ProjectionResult,
    C: ConstraintSet,
    dz: np.ndarray,
    cfg: Optional[SolverConfig] = None,
) -> np.ndarray:
    """Directional derivative of the layer at result's input along dz."""
    return build_jacobian(result, C, cfg).jvp(dz)


def vjp(
    result: ProjectionResult,
    C: ConstraintSet,
    v_bar: np.ndarray,
    cfg: Optional[SolverConfig] = None,
) -> np.ndarray:
    """Pull an output cotangent back to the layer input."""
    return build_jacobian(result, C, cfg).vjp(v_bar)


def region_projector(
    result: ProjectionResult, C: ConstraintSet, cfg: Optional[SolverConfig] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """(P_I, c_I) with g(z) = P_I z + c_I on the region containing z."""
    return build_jacobian(result, C, cfg).projector


@dataclass
class SpectralReport:
    eigenvalues: np.ndarray
    max_distance: float
    suppression: float
    passed: bool


def spectral_diagnostics(
    P: np.ndarray,
    active_rows: Optional[np.ndarray] = None,
    seed: int = 0,
    samples: int = 8,
    tol: float = 1e-8,
    raise_on_failure: bool = True,
) -> SpectralReport:
    """Check that P has spectrum in {0, 1} and annihilates the active rows."""
    eigenvalues = sla.eigvalsh(P)
    distance = float(np.max(np.minimum(np.abs(eigenvalues), np.abs(eigenvalues - 1.0)), initial=0.0))
    suppression = 0.0
    if active_rows is not None and active_rows.shape[0]:
        rng = np.random.default_rng(seed)
        V = rng.standard_normal((P.shape[0], samples))
        suppression = float(np.max(np.abs(active_rows @ (P @ V))))
    passed = distance <= tol and suppression <= tol
    if not passed and raise_on_failure:
        raise SpectrumViolation(
            f"eigenvalue distance {distance:.3g}, suppression {suppression:.3g} exceed {tol:g}"
        )
    return SpectralReport(eigenvalues, distance, suppression, passed)


def lipschitz_estimate(
    C: ConstraintSet,
    trials: int,
    seed: int,
    cfg: Optional[SolverConfig] = None,
    scale: float = 3.0,
) -> float:
    """Largest observed ||g(z1) - g(z2)|| / ||z1 - z2|| over random pairs."""
    cfg = cfg or SolverConfig()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        z1 = scale * rng.standard_normal(C.n)
        radius = 10.0 ** rng.uniform(-3, 1)
        z2 = z1 + radius * rng.standard_normal(C.n)
        dz = np.linalg.norm(z1 - z2)
        if dz == 0:
            continue
        dy = np.linalg.norm(project(z1, C, cfg).y_star - project(z2, C, cfg).y_star)
        worst = max(worst, dy / dz)
    return worst


def finite_difference_jvp(
    z: np.ndarray,
    C: ConstraintSet,
    dz: np.ndarray,
    step: float = 1e-6,
    cfg: Optional[SolverConfig] = None,
) -> Tuple[np.ndarray, bool]:
    """Central-difference JVP and whether both perturbed points stayed in z's region."""
    cfg = cfg or SolverConfig()
    base = project(z, C, cfg)
    plus = project(z + step * dz, C, cfg)
    minus = project(z - step * dz, C, cfg)
    same = (
        set(plus.diff_active.tolist()) == set(base.diff_active.tolist())
        == set(minus.diff_active.tolist())
    )
    return (plus.y_star - minus.y_star) / (2.0 * step), same


def chain_rule_bound(P: np.ndarray, J: np.ndarray) -> Tuple[float, float]:
    """(||P J||_2, ||J||_2) for a composed map g o f with Df = J."""
    return float(np.linalg.norm(P @ J, 2)), float(np.linalg.norm(J, 2))
