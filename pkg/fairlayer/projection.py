"""Euclidean projection of a prediction batch onto an affine constraint set.

``project`` solves ``min 0.5 ||y - z||^2  s.t.  A y <= m1, B y = m2`` with a
primal active-set method and reports the optimal point, the multipliers and
the active set that ``backprop`` differentiates through. Inequality rows with a
single nonzero (box rows) are handled as variable bounds: the coordinate is
fixed instead of adding a row to the Gram system.

``project_penalized`` is the soft primal update of the streaming controller and
``project_oracle`` an independent exhaustive solver used to verify ``project``.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linprog

from fairlayer import config
from fairlayer.constraints import ConstraintSet, DimensionMismatch, FairLayerError

log = logging.getLogger(__name__)


class Infeasible(FairLayerError):
    """Raised when the constraint set has no feasible point."""


class MaxIterations(FairLayerError):
    """Raised when the active-set loop does not converge."""


class ZeroDirection(FairLayerError):
    """Raised when a penalized gap direction is the zero vector."""


class TooManyConstraints(FairLayerError):
    """Raised when the oracle's subset enumeration would be too large."""


@dataclass(frozen=True)
class SolverConfig:
    feasibility_tol: float = config.FEASIBILITY_TOL
    active_tol: float = config.ACTIVE_TOL
    stationarity_tol: float = 1e-9
    max_iterations: Optional[int] = None
    ridge: float = config.RIDGE
    # Only the Euclidean objective (mu = 1) is shipped
    strong_convexity: float = 1.0

    def __post_init__(self) -> None:
        for name in ("feasibility_tol", "active_tol", "stationarity_tol", "ridge"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.strong_convexity != 1.0:
            raise ValueError("only the Euclidean objective (strong_convexity=1) is supported")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    def iteration_budget(self, n: int, q: int) -> int:
        return self.max_iterations or 5 * (n + q) + 100


@dataclass
class ProjectionResult:
    y_star: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    active: np.ndarray
    working: np.ndarray
    weakly_active: np.ndarray
    strict_complementarity: bool
    stationarity_residual: float
    primal_residual: float
    iterations: int
    ridge_applied: bool = False
    active_tol: float = config.ACTIVE_TOL

    @property
    def diff_active(self) -> np.ndarray:
        """Rows used for differentiation: working rows with lambda > tau."""
        keep = self.lam[self.working] > self.active_tol
        return self.working[keep]


@dataclass
class FeasibilityResult:
    feasible: bool
    witness: Optional[np.ndarray]
    margin: float


# -- Gram solves --


def gram_solve(M: np.ndarray, rhs: np.ndarray, ridge: float) -> Tuple[np.ndarray, bool]:
    """Solve (M M^T) x = rhs, falling back to a ridge-regularized system."""
    if M.shape[0] == 0:
        return np.zeros(0), False
    G = M @ M.T
    try:
        return sla.cho_solve(sla.cho_factor(G), rhs), False
    except (np.linalg.LinAlgError, sla.LinAlgError):
        pass
    log.debug("Gram matrix of %d rows is singular, applying ridge %g", G.shape[0], ridge)
    G = G + ridge * np.eye(G.shape[0])
    try:
        return sla.cho_solve(sla.cho_factor(G), rhs), True
    except (np.linalg.LinAlgError, sla.LinAlgError):
        return np.linalg.lstsq(G, rhs, rcond=None)[0], True


# -- Row classification --


class _RowSplit:
    """Inequality rows split into bound rows (one nonzero) and general rows."""

    def __init__(self, C: ConstraintSet) -> None:
        nnz = np.count_nonzero(C.A, axis=1)
        self.bound = np.flatnonzero(nnz == 1)
        self.general = np.flatnonzero(nnz != 1)
        if self.bound.size:
            sub = C.A[self.bound]
            self.coord = np.argmax(np.abs(sub), axis=1)
            self.coef = sub[np.arange(self.bound.size), self.coord]
            self.value = C.m1[self.bound] / self.coef
        else:
            self.coord = np.zeros(0, dtype=int)
            self.coef = np.zeros(0)
            self.value = np.zeros(0)
        self.row_norm = np.linalg.norm(C.A, axis=1)

    def constant_candidates(self) -> List[float]:
        """Constant prediction levels worth trying as phase-1 witnesses."""
        candidates = []
        if self.bound.size:
            upper = self.value[self.coef > 0]
            lower = self.value[self.coef < 0]
            if upper.size and lower.size:
                candidates.append(0.5 * (float(lower.max()) + float(upper.min())))
            elif upper.size:
                candidates.append(float(upper.min()))
            elif lower.size:
                candidates.append(float(lower.max()))
        candidates.append(0.0)
        return candidates


# -- Feasibility --


def _snap_tight_rows(
    y: np.ndarray, C: ConstraintSet, tol: float,
) -> np.ndarray:
    """Move y onto the hyperplanes of nearly tight rows and all equality rows."""
    slack = C.m1 - C.A @ y if C.q else np.zeros(0)
    tight = np.flatnonzero(slack <= tol)
    M = np.vstack([C.A[tight], C.B])
    if M.shape[0] == 0:
        return y
    rhs = np.concatenate([C.m1[tight], C.m2])
    correction = np.linalg.lstsq(M, M @ y - rhs, rcond=None)[0]
    return y - correction


def feasibility_check(
    C: ConstraintSet, cfg: Optional[SolverConfig] = None,
) -> FeasibilityResult:
    """Find a feasible witness, preferring a strictly feasible one.

    Constant vectors (box midpoint, then 0) are tried first; otherwise a HiGHS
    linear program maximizes the uniform slack t in ``A y + t <= m1``.
    Infeasibility is a returned state, never an exception.
    """
    cfg = cfg or SolverConfig()
    n = C.n
    if C.is_empty:
        return FeasibilityResult(True, np.zeros(n), np.inf)

    scale = max(1.0, float(np.max(np.abs(C.m1), initial=0.0)), float(np.max(np.abs(C.m2), initial=0.0)))
    tol = cfg.feasibility_tol * scale

    for level in _RowSplit(C).constant_candidates():
        y = np.full(n, level)
        if C.violation(y) <= tol:
            margin = float(np.min(C.m1 - C.A @ y)) if C.q else np.inf
            return FeasibilityResult(True, y, margin)

    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    bounds = [(None, None)] * n + [(None, 1.0)]
    A_ub = np.hstack([C.A, np.ones((C.q, 1))]) if C.q else None
    b_ub = C.m1 if C.q else None
    A_eq = np.hstack([C.B, np.zeros((C.v, 1))]) if C.v else None
    b_eq = C.m2 if C.v else None
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status == 2:
        return FeasibilityResult(False, None, -np.inf)
    if res.status != 0:
        log.warning("Phase-1 LP ended with status %d: %s", res.status, res.message)
        return FeasibilityResult(False, None, -np.inf)

    margin = float(res.x[-1])
    if margin < -tol:
        return FeasibilityResult(False, None, margin)
    witness = _snap_tight_rows(res.x[:n], C, max(1e-7 * scale, tol))
    residual = C.violation(witness)
    if residual > tol:
        log.debug("Phase-1 witness violates rows by %.3g before active-set cleanup", residual)
    return FeasibilityResult(True, witness, margin)


# -- Active-set solver --


class _ActiveSetSolver:
    """Primal active-set method for the Euclidean projection."""

    def __init__(self, z: np.ndarray, C: ConstraintSet, cfg: SolverConfig) -> None:
        self.z = z
        self.C = C
        self.cfg = cfg
        self.rows = _RowSplit(C)
        self.general_set: List[int] = []     # rows of A (general kind) in W
        self.fixed: Dict[int, int] = {}      # coordinate -> bound row position
        self.ridge_applied = False
        self._bound_pos = {int(r): k for k, r in enumerate(self.rows.bound)}

    def seed_working_set(self, rows: Sequence[int]) -> None:
        for r in rows:
            r = int(r)
            if r in self._bound_pos:
                k = self._bound_pos[r]
                self.fixed.setdefault(int(self.rows.coord[k]), k)
            elif r not in self.general_set:
                self.general_set.append(r)

    def working_rows(self) -> np.ndarray:
        rows = list(self.general_set) + [int(self.rows.bound[k]) for k in self.fixed.values()]
        return np.array(sorted(rows), dtype=int)

    def solve_working(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Projection of z onto the face defined by the working set.

        Returns the point, general-row multipliers, equality multipliers and
        bound-row multipliers (ordered like ``self.fixed.values()``).
        """
        C, z = self.C, self.z
        y = z.copy()
        fixed_coords = np.fromiter(self.fixed.keys(), dtype=int, count=len(self.fixed))
        fixed_pos = np.fromiter(self.fixed.values(), dtype=int, count=len(self.fixed))
        if fixed_coords.size:
            y[fixed_coords] = self.rows.value[fixed_pos]
        free = np.ones(C.n, dtype=bool)
        free[fixed_coords] = False

        M = np.vstack([C.A[self.general_set], C.B])
        rhs = np.concatenate([C.m1[self.general_set], C.m2])
        mu = np.zeros(M.shape[0])
        if M.shape[0]:
            Mf = M[:, free]
            resid = Mf @ z[free] + M[:, ~free] @ y[~free] - rhs
            mu, ridged = gram_solve(Mf, resid, self.cfg.ridge)
            self.ridge_applied |= ridged
            y[free] = z[free] - Mf.T @ mu

        k = len(self.general_set)
        lam_bound = np.zeros(fixed_pos.size)
        if fixed_pos.size:
            r = z - y - (M.T @ mu if M.shape[0] else 0.0)
            lam_bound = r[fixed_coords] / self.rows.coef[fixed_pos]
        return y, mu[:k], mu[k:], lam_bound

    def _drop(self, lam_general: np.ndarray, lam_bound: np.ndarray) -> bool:
        """Remove the working row with the most negative multiplier, if any."""
        worst_g = int(np.argmin(lam_general)) if lam_general.size else -1
        worst_b = int(np.argmin(lam_bound)) if lam_bound.size else -1
        val_g = lam_general[worst_g] if worst_g >= 0 else np.inf
        val_b = lam_bound[worst_b] if worst_b >= 0 else np.inf
        if min(val_g, val_b) >= -self.cfg.active_tol:
            return False
        if val_g <= val_b:
            self.general_set.pop(worst_g)
        else:
            coord = list(self.fixed.keys())[worst_b]
            del self.fixed[coord]
        return True

    def _ratio_test(self, x: np.ndarray, p: np.ndarray) -> Tuple[float, Optional[Tuple[str, int]]]:
        C, rows = self.C, self.rows
        alpha, block = 1.0, None
        pnorm = float(np.linalg.norm(p))
        tiny = 1e-13 * pnorm

        if rows.general.size:
            cand = np.setdiff1d(rows.general, self.general_set, assume_unique=True)
            if cand.size:
                Ap = C.A[cand] @ p
                hit = Ap > tiny * rows.row_norm[cand]
                if np.any(hit):
                    slack = np.maximum(C.m1[cand[hit]] - C.A[cand[hit]] @ x, 0.0)
                    ratios = slack / Ap[hit]
                    j = int(np.argmin(ratios))
                    if ratios[j] < alpha:
                        alpha, block = float(ratios[j]), ("general", int(cand[hit][j]))

        if rows.bound.size:
            free_rows = np.ones(rows.bound.size, dtype=bool)
            if self.fixed:
                fixed_coords = np.fromiter(self.fixed.keys(), dtype=int, count=len(self.fixed))
                free_rows = ~np.isin(rows.coord, fixed_coords)
            Ap = rows.coef * p[rows.coord]
            hit = free_rows & (Ap > tiny * np.abs(rows.coef))
            if np.any(hit):
                idx = np.flatnonzero(hit)
                slack = np.maximum(C.m1[rows.bound[idx]] - rows.coef[idx] * x[rows.coord[idx]], 0.0)
                ratios = slack / Ap[idx]
                j = int(np.argmin(ratios))
                if ratios[j] < alpha:
                    alpha, block = float(ratios[j]), ("bound", int(idx[j]))
        return alpha, block

    def run(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
        budget = self.cfg.iteration_budget(self.C.n, self.C.q)
        step_tol = self.cfg.stationarity_tol * max(1.0, float(np.max(np.abs(self.z))))
        for it in range(1, budget + 1):
            target, lam_g, nu, lam_b = self.solve_working()
            p = target - x
            if np.max(np.abs(p), initial=0.0) <= step_tol:
                x = target
                if not self._drop(lam_g, lam_b):
                    return self._assemble(target, lam_g, nu, lam_b, it)
                continue
            alpha, block = self._ratio_test(x, p)
            x = x + alpha * p
            if block is None:
                continue
            kind, k = block
            if kind == "general":
                self.general_set.append(k)
            else:
                coord = int(self.rows.coord[k])
                self.fixed[coord] = k
                x[coord] = self.rows.value[k]
        raise MaxIterations(f"active-set loop did not converge in {budget} iterations")

    def _assemble(self, y, lam_g, nu, lam_b, iterations):
        lam = np.zeros(self.C.q)
        lam[self.general_set] = lam_g
        for k, value in zip(self.fixed.values(), lam_b):
            lam[self.rows.bound[k]] = value
        # tiny negative multipliers inside the tolerance are rounded to zero
        lam = np.maximum(lam, 0.0)
        return y, lam, nu, iterations


def _tight_rows(y: np.ndarray, C: ConstraintSet, tol: float) -> np.ndarray:
    if not C.q:
        return np.zeros(0, dtype=int)
    return np.flatnonzero(np.abs(C.A @ y - C.m1) <= tol)


def _weakly_active(
    tight: np.ndarray, lam: np.ndarray, C: ConstraintSet, tau: float,
) -> np.ndarray:
    """Tight rows with lambda <= tau that are not implied by the strong rows."""
    weak = tight[lam[tight] <= tau]
    if weak.size == 0:
        return weak
    strong = tight[lam[tight] > tau]
    S = np.vstack([C.A[strong], C.B])
    if S.shape[0] == 0:
        return weak
    coeffs = np.linalg.lstsq(S.T, C.A[weak].T, rcond=None)[0]
    resid = np.linalg.norm(C.A[weak].T - S.T @ coeffs, axis=0)
    norms = np.linalg.norm(C.A[weak], axis=1)
    return weak[resid > 1e-9 * np.maximum(norms, 1.0)]


def _result(
    z: np.ndarray,
    y: np.ndarray,
    lam: np.ndarray,
    nu: np.ndarray,
    working: np.ndarray,
    C: ConstraintSet,
    cfg: SolverConfig,
    iterations: int,
    ridge_applied: bool,
) -> ProjectionResult:
    grad = y - z
    if C.q:
        grad = grad + C.A.T @ lam
    if C.v:
        grad = grad + C.B.T @ nu
    scale = max(1.0, float(np.max(np.abs(z), initial=0.0)))
    tight = _tight_rows(y, C, cfg.feasibility_tol * scale)
    weak = _weakly_active(tight, lam, C, cfg.active_tol)
    if weak.size:
        log.debug("%d weakly active row(s) excluded from differentiation", weak.size)
    return ProjectionResult(
        y_star=y,
        lam=lam,
        nu=nu,
        active=tight,
        working=working,
        weakly_active=weak,
        strict_complementarity=weak.size == 0,
        stationarity_residual=float(np.max(np.abs(grad), initial=0.0)),
        primal_residual=C.violation(y),
        iterations=iterations,
        ridge_applied=ridge_applied,
        active_tol=cfg.active_tol,
    )


def project(
    z: np.ndarray,
    C: ConstraintSet,
    cfg: Optional[SolverConfig] = None,
    warm_start: Optional[Sequence[int]] = None,
) -> ProjectionResult:
    """Euclidean projection of z onto C with multipliers and active set.

    ``warm_start`` is a set of inequality rows expected to be active; it is
    used when the face it defines contains a feasible point.
    """
    cfg = cfg or SolverConfig()
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.shape[0] != C.n:
        raise DimensionMismatch(f"z has shape {z.shape}, constraint set has {C.n} columns")
    if not np.all(np.isfinite(z)):
        raise DimensionMismatch("z must be finite")

    empty_nu = np.zeros(C.v)
    if C.is_empty:
        return _result(z, z.copy(), np.zeros(0), empty_nu, np.zeros(0, dtype=int), C, cfg, 0, False)

    scale = max(1.0, float(np.max(np.abs(C.m1), initial=0.0)), float(np.max(np.abs(C.m2), initial=0.0)))
    if C.violation(z) <= cfg.feasibility_tol * scale:
        return _result(z, z.copy(), np.zeros(C.q), empty_nu, np.zeros(0, dtype=int), C, cfg, 0, False)

    solver = _ActiveSetSolver(z, C, cfg)
    start = None
    if warm_start is not None and len(warm_start):
        solver.seed_working_set(warm_start)
        candidate = solver.solve_working()[0]
        if C.violation(candidate) <= cfg.feasibility_tol * scale:
            start = candidate
        else:
            solver = _ActiveSetSolver(z, C, cfg)

    if start is None:
        phase1 = feasibility_check(C, cfg)
        if not phase1.feasible:
            raise Infeasible("constraint set is empty")
        start = phase1.witness

    y, lam, nu, iterations = solver.run(start.copy())
    return _result(z, y, lam, nu, solver.working_rows(), C, cfg, iterations, solver.ridge_applied)


# -- Penalized primal update --


def _soft_threshold(t: float, threshold: float) -> float:
    return float(np.sign(t) * max(abs(t) - threshold, 0.0))


def project_penalized(
    z_raw: np.ndarray,
    kappa: float,
    directions: np.ndarray,
    offsets: Optional[np.ndarray] = None,
    cfg: Optional[SolverConfig] = None,
    max_iterations: int = 20000,
) -> np.ndarray:
    """argmin_y ||y - z_raw||^2 + kappa * sum_k |a_k^T y - c_k|.

    One direction has the closed form of a soft threshold along a; several
    directions are solved by accelerated projected gradient on the box-
    constrained dual ``max_{|u| <= kappa} u^T (G z - c) - ||G^T u||^2 / 4``.
    """
    cfg = cfg or SolverConfig()
    z = np.asarray(z_raw, dtype=float)
    G = np.atleast_2d(np.asarray(directions, dtype=float))
    c = np.zeros(G.shape[0]) if offsets is None else np.atleast_1d(np.asarray(offsets, dtype=float))
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    if G.shape[1] != z.shape[0] or c.shape[0] != G.shape[0]:
        raise DimensionMismatch("directions/offsets do not match z")
    sq_norms = np.einsum("ij,ij->i", G, G)
    if np.any(sq_norms == 0):
        raise ZeroDirection("gap direction must be nonzero")
    if kappa == 0:
        return z.copy()

    if G.shape[0] == 1:
        a, norm2 = G[0], sq_norms[0]
        t0 = float(a @ z) - c[0]
        t = _soft_threshold(t0, kappa * norm2 / 2.0)
        return z + a * (t - t0) / norm2

    lipschitz = np.linalg.norm(G @ G.T, 2) / 2.0
    step = 1.0 / lipschitz
    u = np.zeros(G.shape[0])
    v = u.copy()
    momentum = 1.0
    y_prev = z.copy()
    tol = cfg.stationarity_tol * max(1.0, float(np.max(np.abs(z))))
    for _ in range(max_iterations):
        grad = G @ (z - G.T @ v / 2.0) - c
        u_next = np.clip(v + step * grad, -kappa, kappa)
        momentum_next = (1.0 + np.sqrt(1.0 + 4.0 * momentum ** 2)) / 2.0
        v = u_next + ((momentum - 1.0) / momentum_next) * (u_next - u)
        u, momentum = u_next, momentum_next
        y = z - G.T @ u / 2.0
        if np.max(np.abs(y - y_prev)) <= tol:
            return y
        y_prev = y
    log.warning("Penalized projection stopped after %d iterations", max_iterations)
    return z - G.T @ u / 2.0


# -- Exhaustive oracle --


def project_oracle(
    z: np.ndarray, C: ConstraintSet, max_rows: int = 12, tol: float = 1e-9,
) -> np.ndarray:
    """Projection by enumerating candidate active sets.

    For every subset I of inequality rows (plus all equality rows) the face
    projection ``y = P_I z + c_I`` is formed in closed form; the first
    candidate that is primal feasible with nonnegative multipliers is the
    unique optimum by KKT sufficiency.
    """
    z = np.asarray(z, dtype=float)
    if C.q > max_rows:
        raise TooManyConstraints(f"{C.q} inequality rows exceed the oracle budget of {max_rows}")
    scale = max(1.0, float(np.max(np.abs(z), initial=0.0)))
    for size in range(C.q + 1):
        for subset in itertools.combinations(range(C.q), size):
            rows = list(subset)
            M = np.vstack([C.A[rows], C.B])
            rhs = np.concatenate([C.m1[rows], C.m2])
            if M.shape[0]:
                mu = np.linalg.pinv(M @ M.T) @ (M @ z - rhs)
                y = z - M.T @ mu
            else:
                mu, y = np.zeros(0), z.copy()
            if C.violation(y) > tol * scale:
                continue
            if size and np.min(mu[:size]) < -tol * scale:
                continue
            return y
    raise Infeasible("no candidate active set satisfies the KKT conditions")
