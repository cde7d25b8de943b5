"""Primal-dual fair inference over a stream of prediction batches.

Batches of at least ``b_tau`` samples are hard-projected onto their constraint
set. Smaller batches are shrunk along their gap directions by a penalty whose
weight is a dual variable:

    y_hat = argmin ||y - z||^2 + lam * |b| * v(y)
    w     = |b| * (v(y_hat) - epsilon)
    lam  <- max(0, lam + eta / sqrt(t + 1) * w)

so that the size-weighted average gap over the stream converges to epsilon.
``lemma1_bound`` bounds the aggregate gap of per-batch feasible streams whose
group proportions vary between batches.
"""

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fairlayer import config
from fairlayer.constraints import (
    GAP_KINDS,
    DegenerateGroup,
    FairLayerError,
    FairnessSpec,
    GroupMasks,
    NoApplicableRegion,
    compile,
    gap_rows,
)
from fairlayer.projection import SolverConfig, project, project_penalized
from fairlayer.state import read_json, write_json_atomic

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("t", "batch_size", "branch", "gap", "weighted_violation", "lambda", "running_weighted_avg")


class EmptyStream(FairLayerError):
    """Raised when an aggregate is requested before any batch was counted."""


class DegenerateProportion(FairLayerError):
    """Raised when one group is absent from the whole stream."""


@dataclass
class StepRecord:
    t: int
    batch_size: int
    branch: str
    gap: float
    weighted_violation: float
    lam: float
    running_weighted_avg: float


@dataclass
class DualControllerState:
    """Controller state; steps must be applied in stream order."""

    eta: float = config.STREAM_ETA
    b_tau: int = config.STREAM_B_TAU
    epsilon: float = config.EPSILON
    exclude_missing: bool = False
    lam: float = 0.0
    t: int = 0
    batches: int = 0
    total_size: int = 0
    weighted_gap: float = 0.0
    records: List[StepRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.b_tau < 1:
            raise ValueError(f"b_tau must be at least 1, got {self.b_tau}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    def snapshot(self) -> "DualControllerState":
        return copy.deepcopy(self)

    @property
    def running_average(self) -> float:
        return self.weighted_gap / self.total_size if self.total_size else 0.0


# -- Gap helpers --


def _gap_directions(
    specs: Sequence[FairnessSpec], masks: GroupMasks, y_true: Optional[np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked (a_k, c_k) over every gap-type spec; empty when all are vacuous."""
    directions, offsets = [], []
    for spec in specs:
        if spec.kind not in GAP_KINDS:
            continue
        try:
            rows = gap_rows(spec, masks[spec.attribute], y_true)
        except (DegenerateGroup, NoApplicableRegion):
            continue
        for _, a, c in rows:
            directions.append(a)
            offsets.append(c)
    n = masks.n
    if not directions:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(directions), np.asarray(offsets)


def batch_gap(y_hat: np.ndarray, directions: np.ndarray, offsets: np.ndarray) -> float:
    """v(y): the largest |a_k^T y - c_k|, zero for a vacuous batch."""
    if directions.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(directions @ y_hat - offsets)))


# -- Controller --


def step(
    state: DualControllerState,
    z_raw: np.ndarray,
    masks: GroupMasks,
    specs: Sequence[FairnessSpec],
    y_true: Optional[np.ndarray] = None,
    solver: Optional[SolverConfig] = None,
) -> Tuple[np.ndarray, StepRecord]:
    """Process one batch in place and return its fair predictions.

    A small batch missing a group has gap 0. It is counted in the stream
    totals (and updates the dual) unless ``state.exclude_missing`` is set, in
    which case it is passed through and left out of every aggregate.
    """
    z = np.asarray(z_raw, dtype=float)
    size = z.shape[0]

    if size >= state.b_tau:
        # a gap spec whose group is absent is vacuous here; box rows still apply
        C = compile(specs, masks, y_true, size, on_degenerate="skip")
        y_hat = project(z, C, solver).y_star
        directions, offsets = _gap_directions(specs, masks, y_true)
        v = batch_gap(y_hat, directions, offsets)
        branch = "hard"
        w = size * (v - state.epsilon)
    else:
        directions, offsets = _gap_directions(specs, masks, y_true)
        vacuous = directions.shape[0] == 0
        if vacuous:
            log.debug("Batch %d has a missing group, gap taken as 0", state.batches)
        if vacuous and state.exclude_missing:
            state.batches += 1
            record = StepRecord(state.batches - 1, size, "excluded", 0.0, 0.0, state.lam, state.running_average)
            state.records.append(record)
            return z.copy(), record
        if vacuous:
            y_hat = z.copy()
        else:
            y_hat = project_penalized(z, state.lam * size, directions, offsets, solver)
        v = batch_gap(y_hat, directions, offsets)
        w = size * (v - state.epsilon)
        eta_t = state.eta / np.sqrt(state.t + 1)
        state.lam = max(0.0, state.lam + eta_t * w)
        state.t += 1
        branch = "vacuous" if vacuous else "penalized"

    state.batches += 1
    state.total_size += size
    state.weighted_gap += size * v
    record = StepRecord(state.batches - 1, size, branch, v, w, state.lam, state.running_average)
    state.records.append(record)
    return y_hat, record


def aggregate_violation(state: DualControllerState) -> float:
    """Size-weighted average gap over every counted batch."""
    if state.total_size == 0:
        raise EmptyStream("no batch has been counted yet")
    return state.weighted_gap / state.total_size


def violation_envelope(state: DualControllerState) -> float:
    """epsilon + lam_T / (eta_{T-1} * sum |b|): an upper bound on the running average.

    Telescoping the dual update gives sum_t w_t <= lam_T / eta_{T-1} because
    eta_t is nonincreasing and lam stays nonnegative; hard batches add
    nonpositive w.
    """
    if state.total_size == 0:
        raise EmptyStream("no batch has been counted yet")
    if state.t == 0:
        return state.epsilon
    eta_last = state.eta / np.sqrt(state.t)
    return state.epsilon + state.lam / (eta_last * state.total_size)


def lambda_tail_slope(lambdas: Sequence[float], tail: float = 0.5) -> float:
    """Least-squares slope of log(lam_t) against log(t) over the final ``tail`` share."""
    lam = np.asarray(lambdas, dtype=float)
    t = np.arange(1, lam.shape[0] + 1, dtype=float)
    start = int(lam.shape[0] * (1.0 - tail))
    keep = (t > start) & (lam > 0)
    if keep.sum() < 2:
        return 0.0
    return float(np.polyfit(np.log(t[keep]), np.log(lam[keep]), 1)[0])


# -- Aggregate fairness under varying proportions --


@dataclass(frozen=True)
class BatchStats:
    n0: int
    n1: int
    f0: float
    f1: float

    def __post_init__(self) -> None:
        if self.n0 < 0 or self.n1 < 0:
            raise ValueError("group counts must be >= 0")
        if not (np.isfinite(self.f0) and np.isfinite(self.f1)):
            raise ValueError("group statistics must be finite")

    @classmethod
    def from_batch(cls, y_hat: np.ndarray, mask: np.ndarray) -> "BatchStats":
        mask = np.asarray(mask)
        group0, group1 = y_hat[mask == 0], y_hat[mask == 1]
        return cls(
            int(group0.shape[0]),
            int(group1.shape[0]),
            float(group0.mean()) if group0.size else 0.0,
            float(group1.mean()) if group1.size else 0.0,
        )


@dataclass(frozen=True)
class Lemma1Result:
    bound: float
    realized: float
    delta_p: float
    r: float
    p_bar: float

    @property
    def holds(self) -> bool:
        return self.realized <= self.bound + 1e-9


def lemma1_bound(stats: Sequence[BatchStats], epsilon: float) -> Lemma1Result:
    """epsilon + delta_p * R * (1/p_bar + 1/(1 - p_bar)) and the realized aggregate gap.

    ``p_bar`` is the stream share of group 0, ``delta_p`` the largest deviation
    of a batch share from it and ``R`` the largest |group statistic|.
    """
    if not stats:
        raise EmptyStream("no batch statistics")
    n0 = np.array([s.n0 for s in stats], dtype=float)
    n1 = np.array([s.n1 for s in stats], dtype=float)
    f0 = np.array([s.f0 for s in stats])
    f1 = np.array([s.f1 for s in stats])
    if np.any(n0 == 0) or np.any(n1 == 0):
        raise DegenerateGroup("every batch must contain both groups")
    p_bar = n0.sum() / (n0.sum() + n1.sum())
    if not 0.0 < p_bar < 1.0:
        raise DegenerateProportion(f"overall group-0 share is {p_bar}")
    p_b = n0 / (n0 + n1)
    delta_p = float(np.max(np.abs(p_b - p_bar)))
    r = float(max(np.max(np.abs(f0)), np.max(np.abs(f1))))
    bound = epsilon + delta_p * r * (1.0 / p_bar + 1.0 / (1.0 - p_bar))
    realized = abs(float(n0 @ f0 / n0.sum() - n1 @ f1 / n1.sum()))
    return Lemma1Result(bound, realized, delta_p, r, float(p_bar))


# -- Persistence --


def state_to_dict(state: DualControllerState) -> dict:
    doc = asdict(state)
    doc["records"] = [asdict(r) for r in state.records]
    doc["format_version"] = CHECKPOINT_VERSION
    return doc


def save_checkpoint(state: DualControllerState, path: Path, position: int = 0) -> None:
    """Write every controller field plus the stream position reached."""
    doc = state_to_dict(state)
    doc["position"] = int(position)
    write_json_atomic(Path(path), doc)


def load_checkpoint(path: Path) -> Tuple[DualControllerState, int]:
    """Restore (state, position). A corrupt file is backed up and reported."""
    doc = read_json(Path(path), backup_corrupt=True)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise FairLayerError(f"unsupported checkpoint version in {path}")
    position = int(doc.pop("position", 0))
    doc.pop("format_version")
    records = [StepRecord(**r) for r in doc.pop("records", [])]
    return DualControllerState(**doc, records=records), position


class StreamLog:
    """Append-only CSV of step records."""

    def __init__(self, path: Path) -> None:
        self.path = Path(path)

    def truncate_to(self, rows: int) -> None:
        """Drop rows past ``rows`` (records written after the last checkpoint)."""
        if not self.path.exists():
            return
        with open(self.path, newline="") as f:
            lines = list(csv.reader(f))
        if len(lines) - 1 <= rows:
            return
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerows(lines[: rows + 1])

    def append(self, records: Sequence[StepRecord]) -> None:
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", newline="") as f:
            writer = csv.writer(f)
            if new:
                writer.writerow(LOG_COLUMNS)
            for r in records:
                writer.writerow([
                    r.t, r.batch_size, r.branch, f"{r.gap:.17g}",
                    f"{r.weighted_violation:.17g}", f"{r.lam:.17g}",
                    f"{r.running_weighted_avg:.17g}",
                ])
