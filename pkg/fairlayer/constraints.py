"""Fairness criteria compiled into affine constraint systems.

A batch of predictions y is constrained by ``A y <= m1`` and ``B y = m2``.
Each absolute-value criterion ``|a^T y - c| <= eps`` expands to the row pair
``a^T y <= eps + c`` and ``-a^T y <= eps - c``. Every row carries a tag naming
the criterion it came from, so solver diagnostics and reports can attribute
violations.
"""

import configparser
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)


class FairLayerError(RuntimeError):
    """Base class for every domain error raised by fairlayer."""


class DegenerateGroup(FairLayerError):
    """Raised when a batch lacks members of one group of a protected attribute."""


class NoApplicableRegion(FairLayerError):
    """Raised when no equalized-odds region holds samples from both groups."""


class InvalidBounds(FairLayerError):
    """Raised when a box has lower > upper."""


class UnknownAttribute(FairLayerError):
    """Raised when a spec names an attribute missing from the group masks."""


class InvalidSpec(FairLayerError):
    """Raised when a FairnessSpec is malformed."""


class DimensionMismatch(FairLayerError):
    """Raised when array shapes do not agree with a model or constraint set."""


class SpecKind(str, Enum):
    MEAN_PARITY = "mean_parity"
    EQUALIZED_RESIDUALS = "equalized_residuals"
    GROUP_RESIDUAL = "group_residual"
    EQUALIZED_ODDS = "equalized_odds"
    BOX = "box"
    GENERIC_AFFINE = "generic_affine"


# Kinds whose constraint is a bound on |a^T y - c| built from a group mask
GAP_KINDS = frozenset({
    SpecKind.MEAN_PARITY,
    SpecKind.EQUALIZED_RESIDUALS,
    SpecKind.GROUP_RESIDUAL,
    SpecKind.EQUALIZED_ODDS,
})

_NEEDS_TARGET = frozenset({
    SpecKind.EQUALIZED_RESIDUALS,
    SpecKind.GROUP_RESIDUAL,
    SpecKind.EQUALIZED_ODDS,
})


@dataclass(eq=False)
class FairnessSpec:
    """Declarative description of one fairness criterion."""

    kind: SpecKind
    epsilon: float = 0.0
    attribute: Optional[str] = None
    regions: Tuple[Tuple[float, float], ...] = ()
    lower: Optional[float] = None
    upper: Optional[float] = None
    A: Optional[np.ndarray] = None
    m1: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self) -> None:
        self.kind = SpecKind(self.kind)
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise InvalidSpec(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.kind in GAP_KINDS and not self.attribute:
            raise InvalidSpec(f"{self.kind.value} requires an attribute")
        if self.kind == SpecKind.BOX:
            if self.lower is None or self.upper is None:
                raise InvalidSpec("box requires lower and upper")
            if self.lower > self.upper:
                raise InvalidBounds(f"lower {self.lower} > upper {self.upper}")
        if self.kind == SpecKind.EQUALIZED_ODDS:
            if not self.regions:
                raise InvalidSpec("equalized_odds requires at least one region")
            self.regions = tuple((float(lo), float(hi)) for lo, hi in self.regions)
            ordered = sorted(self.regions)
            for lo, hi in ordered:
                if lo > hi:
                    raise InvalidSpec(f"region [{lo}, {hi}] is empty")
            for (_, hi), (lo, _) in zip(ordered, ordered[1:]):
                if lo <= hi:
                    raise InvalidSpec("equalized_odds regions must be disjoint")
        if self.kind == SpecKind.GENERIC_AFFINE and self.A is None and self.B is None:
            raise InvalidSpec("generic_affine requires A/m1 or B/m2")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.attribute:
            return f"{self.kind.value}:{self.attribute}"
        return self.kind.value

    @property
    def needs_target(self) -> bool:
        return self.kind in _NEEDS_TARGET


@dataclass
class GroupMasks:
    """Binary membership vectors, one per protected attribute."""

    masks: Dict[str, np.ndarray]

    def __post_init__(self) -> None:
        lengths = set()
        clean = {}
        for attr, mask in self.masks.items():
            arr = np.asarray(mask)
            if arr.ndim != 1:
                raise InvalidSpec(f"mask for {attr} must be one-dimensional")
            if not np.all((arr == 0) | (arr == 1)):
                raise InvalidSpec(f"mask for {attr} must be binary")
            clean[attr] = arr.astype(np.int8)
            lengths.add(arr.shape[0])
        if len(lengths) > 1:
            raise InvalidSpec(f"masks have different lengths: {sorted(lengths)}")
        self.masks = clean

    @property
    def n(self) -> int:
        return next(iter(self.masks.values())).shape[0] if self.masks else 0

    @property
    def attributes(self) -> List[str]:
        return list(self.masks)

    def __getitem__(self, attribute: str) -> np.ndarray:
        try:
            return self.masks[attribute]
        except KeyError:
            raise UnknownAttribute(f"unknown protected attribute: {attribute}") from None

    def take(self, idx: np.ndarray) -> "GroupMasks":
        return GroupMasks({a: m[idx] for a, m in self.masks.items()})

    def group_key(self) -> np.ndarray:
        """Integer code of the joint group membership, for stratified batching."""
        key = np.zeros(self.n, dtype=np.int64)
        for mask in self.masks.values():
            key = key * 2 + mask
        return key

    @classmethod
    def from_columns(cls, X: np.ndarray, columns: Sequence[int]) -> "GroupMasks":
        """Masks from protected columns of X; attribute id is ``x<col+1>``."""
        return cls({f"x{c + 1}": np.rint(X[:, c]).astype(np.int8) for c in columns})


class RowTag(NamedTuple):
    spec: str
    part: str


@dataclass
class ConstraintSet:
    """Stacked affine system ``A y <= m1``, ``B y = m2`` over a batch of size n."""

    A: np.ndarray
    m1: np.ndarray
    B: np.ndarray
    m2: np.ndarray
    ineq_tags: List[RowTag] = field(default_factory=list)
    eq_tags: List[RowTag] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.m1 = np.asarray(self.m1, dtype=float).reshape(-1)
        self.m2 = np.asarray(self.m2, dtype=float).reshape(-1)
        if self.A.shape[1] != self.B.shape[1]:
            raise InvalidSpec("A and B must have the same column count")
        if self.A.shape[0] != self.m1.shape[0] or self.B.shape[0] != self.m2.shape[0]:
            raise InvalidSpec("row counts of A/B must match m1/m2")
        for arr in (self.A, self.B, self.m1, self.m2):
            if not np.all(np.isfinite(arr)):
                raise InvalidSpec("constraint entries must be finite")
        if not self.ineq_tags:
            self.ineq_tags = [RowTag("", "")] * self.q
        if not self.eq_tags:
            self.eq_tags = [RowTag("", "")] * self.v

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def q(self) -> int:
        return self.A.shape[0]

    @property
    def v(self) -> int:
        return self.B.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.q == 0 and self.v == 0

    @classmethod
    def empty(cls, n: int) -> "ConstraintSet":
        return cls(np.zeros((0, n)), np.zeros(0), np.zeros((0, n)), np.zeros(0))

    @classmethod
    def stack(cls, parts: Iterable["ConstraintSet"], n: int) -> "ConstraintSet":
        parts = list(parts)
        if not parts:
            return cls.empty(n)
        return cls(
            np.vstack([p.A for p in parts]),
            np.concatenate([p.m1 for p in parts]),
            np.vstack([p.B for p in parts]),
            np.concatenate([p.m2 for p in parts]),
            [t for p in parts for t in p.ineq_tags],
            [t for p in parts for t in p.eq_tags],
        )

    def retag(self, label: str) -> "ConstraintSet":
        return ConstraintSet(
            self.A, self.m1, self.B, self.m2,
            [RowTag(label, t.part) for t in self.ineq_tags],
            [RowTag(label, t.part) for t in self.eq_tags],
        )

    def rows_for(self, label: str) -> List[int]:
        return [i for i, t in enumerate(self.ineq_tags) if t.spec == label]

    def violation(self, y: np.ndarray) -> float:
        """Largest violation of any row at y (0 when feasible)."""
        worst = 0.0
        if self.q:
            worst = max(worst, float(np.max(self.A @ y - self.m1)))
        if self.v:
            worst = max(worst, float(np.max(np.abs(self.B @ y - self.m2))))
        return worst


# -- Gap directions --


def _split_counts(mask: np.ndarray) -> Tuple[int, int]:
    n1 = int(mask.sum())
    return mask.shape[0] - n1, n1


def parity_direction(mask: np.ndarray) -> np.ndarray:
    """Coefficients a with a^T y = mean_0(y) - mean_1(y)."""
    mask = np.asarray(mask)
    n0, n1 = _split_counts(mask)
    if n0 == 0 or n1 == 0:
        raise DegenerateGroup(f"batch has {n0} non-members and {n1} members")
    return np.where(mask == 0, 1.0 / n0, -1.0 / n1)


def _region_direction(mask: np.ndarray, selected: np.ndarray) -> Optional[np.ndarray]:
    n0 = int(np.sum(selected & (mask == 0)))
    n1 = int(np.sum(selected & (mask == 1)))
    if n0 == 0 or n1 == 0:
        return None
    a = np.zeros(mask.shape[0])
    a[selected & (mask == 0)] = 1.0 / n0
    a[selected & (mask == 1)] = -1.0 / n1
    return a


def gap_rows(
    spec: FairnessSpec, mask: np.ndarray, y_true: Optional[np.ndarray] = None,
) -> List[Tuple[str, np.ndarray, float]]:
    """The (part, a, c) pairs whose ``|a^T y - c|`` are the spec's gaps."""
    mask = np.asarray(mask)
    if spec.needs_target:
        if y_true is None:
            raise InvalidSpec(f"{spec.kind.value} requires y_true")
        y_true = np.asarray(y_true, dtype=float)
        if y_true.shape != mask.shape:
            raise InvalidSpec("y_true length must equal mask length")

    if spec.kind == SpecKind.MEAN_PARITY:
        return [("gap", parity_direction(mask), 0.0)]

    if spec.kind == SpecKind.EQUALIZED_RESIDUALS:
        a = parity_direction(mask)
        return [("gap", a, float(a @ y_true))]

    if spec.kind == SpecKind.GROUP_RESIDUAL:
        n0, n1 = _split_counts(mask)
        if n0 == 0 or n1 == 0:
            raise DegenerateGroup(f"batch has {n0} non-members and {n1} members")
        rows = []
        for g, count in ((0, n0), (1, n1)):
            e = np.where(mask == g, 1.0 / count, 0.0)
            rows.append((f"group{g}", e, float(e @ y_true)))
        return rows

    if spec.kind == SpecKind.EQUALIZED_ODDS:
        rows = []
        for lo, hi in spec.regions:
            selected = (y_true >= lo) & (y_true <= hi)
            a = _region_direction(mask, selected)
            if a is None:
                log.warning(
                    "Skipping region [%g, %g] of %s: one group has no samples",
                    lo, hi, spec.label,
                )
                continue
            rows.append((f"region[{lo:g},{hi:g}]", a, 0.0))
        if not rows:
            raise NoApplicableRegion(f"no region of {spec.label} holds both groups")
        return rows

    raise InvalidSpec(f"{spec.kind.value} has no gap direction")


def _row_pairs(rows: List[Tuple[str, np.ndarray, float]], epsilon: float) -> ConstraintSet:
    A, m1, tags = [], [], []
    for part, a, c in rows:
        A.extend([a, -a])
        m1.extend([epsilon + c, epsilon - c])
        tags.extend([RowTag("", f"{part}+"), RowTag("", f"{part}-")])
    n = rows[0][1].shape[0]
    return ConstraintSet(np.array(A), np.array(m1), np.zeros((0, n)), np.zeros(0), tags)


# -- Builders --


def build_mean_parity(mask: np.ndarray, epsilon: float) -> ConstraintSet:
    """|mean_0(y) - mean_1(y)| <= epsilon."""
    return _row_pairs([("gap", parity_direction(mask), 0.0)], epsilon)


def build_equalized_residuals(
    mask: np.ndarray, y_true: np.ndarray, epsilon: float,
) -> ConstraintSet:
    """|mean_0(y - y_true) - mean_1(y - y_true)| <= epsilon."""
    spec = FairnessSpec(SpecKind.EQUALIZED_RESIDUALS, epsilon, attribute="_")
    return _row_pairs(gap_rows(spec, mask, y_true), epsilon)


def build_group_residual(
    mask: np.ndarray, y_true: np.ndarray, epsilon: float,
) -> ConstraintSet:
    """|mean_g(y - y_true)| <= epsilon for both groups g."""
    spec = FairnessSpec(SpecKind.GROUP_RESIDUAL, epsilon, attribute="_")
    return _row_pairs(gap_rows(spec, mask, y_true), epsilon)


def build_equalized_odds(
    mask: np.ndarray,
    y_true: np.ndarray,
    regions: Sequence[Tuple[float, float]],
    epsilon: float,
) -> ConstraintSet:
    """Mean parity restricted to samples whose target lies in each region."""
    spec = FairnessSpec(
        SpecKind.EQUALIZED_ODDS, epsilon, attribute="_", regions=tuple(regions),
    )
    return _row_pairs(gap_rows(spec, mask, y_true), epsilon)


def build_box(lower: float, upper: float, n: int) -> ConstraintSet:
    """lower <= y_i <= upper for every prediction; upper rows come first."""
    if lower > upper:
        raise InvalidBounds(f"lower {lower} > upper {upper}")
    eye = np.eye(n)
    tags = [RowTag("", f"upper[{i}]") for i in range(n)]
    tags += [RowTag("", f"lower[{i}]") for i in range(n)]
    return ConstraintSet(
        np.vstack([eye, -eye]),
        np.concatenate([np.full(n, float(upper)), np.full(n, -float(lower))]),
        np.zeros((0, n)),
        np.zeros(0),
        tags,
    )


def build_generic_affine(spec: FairnessSpec, n: int) -> ConstraintSet:
    A = spec.A if spec.A is not None else np.zeros((0, n))
    m1 = spec.m1 if spec.m1 is not None else np.zeros(0)
    B = spec.B if spec.B is not None else np.zeros((0, n))
    m2 = spec.m2 if spec.m2 is not None else np.zeros(0)
    cs = ConstraintSet(A, m1, B, m2)
    if cs.n != n:
        raise InvalidSpec(f"generic_affine has {cs.n} columns, batch has {n}")
    cs.ineq_tags = [RowTag("", f"row{i}") for i in range(cs.q)]
    cs.eq_tags = [RowTag("", f"eq{i}") for i in range(cs.v)]
    return cs


def build_spec(
    spec: FairnessSpec,
    masks: GroupMasks,
    y_true: Optional[np.ndarray],
    n_b: int,
) -> ConstraintSet:
    """Constraint rows of one spec over a batch, untagged."""
    if spec.kind == SpecKind.BOX:
        return build_box(spec.lower, spec.upper, n_b)
    if spec.kind == SpecKind.GENERIC_AFFINE:
        return build_generic_affine(spec, n_b)
    mask = masks[spec.attribute]
    if mask.shape[0] != n_b:
        raise InvalidSpec(f"mask length {mask.shape[0]} != batch size {n_b}")
    return _row_pairs(gap_rows(spec, mask, y_true), spec.epsilon)


def unique_labels(specs: Sequence[FairnessSpec]) -> List[str]:
    """Spec labels, suffixed with #k where two specs would collide."""
    seen: Dict[str, int] = {}
    labels = []
    for spec in specs:
        base = spec.label
        count = seen.get(base, 0)
        seen[base] = count + 1
        labels.append(base if count == 0 else f"{base}#{count}")
    return labels


def compile(
    specs: Sequence[FairnessSpec],
    masks: GroupMasks,
    y_true: Optional[np.ndarray],
    n_b: int,
    on_degenerate: str = "raise",
) -> ConstraintSet:
    """Row-stack every spec's system over one batch, tagging rows by spec label.

    With ``on_degenerate="skip"`` a spec whose groups are missing from the
    batch is dropped with a warning instead of raising.
    """
    if on_degenerate not in ("raise", "skip"):
        raise ValueError(f"on_degenerate must be 'raise' or 'skip', got {on_degenerate!r}")
    for spec in specs:
        if spec.kind in GAP_KINDS and spec.attribute not in masks.masks:
            raise UnknownAttribute(f"unknown protected attribute: {spec.attribute}")

    parts = []
    for spec, label in zip(specs, unique_labels(specs)):
        try:
            parts.append(build_spec(spec, masks, y_true, n_b).retag(label))
        except (DegenerateGroup, NoApplicableRegion) as exc:
            if on_degenerate == "raise":
                raise
            log.warning("Dropping %s for this batch: %s", label, exc)
    return ConstraintSet.stack(parts, n_b)


# -- Gaps --


class GapRecord(NamedTuple):
    spec: str
    part: str
    value: float
    tolerance: float

    @property
    def satisfied(self) -> bool:
        return self.value <= self.tolerance


def spec_gaps(
    spec: FairnessSpec,
    masks: GroupMasks,
    y_true: Optional[np.ndarray],
    y_hat: np.ndarray,
    label: Optional[str] = None,
) -> List[GapRecord]:
    label = label or spec.label
    y_hat = np.asarray(y_hat, dtype=float)
    if spec.kind == SpecKind.BOX:
        worst = max(0.0, float(np.max(y_hat - spec.upper)), float(np.max(spec.lower - y_hat)))
        return [GapRecord(label, "box", worst, 0.0)]
    if spec.kind == SpecKind.GENERIC_AFFINE:
        worst = build_generic_affine(spec, y_hat.shape[0]).violation(y_hat)
        return [GapRecord(label, "affine", worst, 0.0)]
    rows = gap_rows(spec, masks[spec.attribute], y_true)
    return [
        GapRecord(label, part, abs(float(a @ y_hat) - c), spec.epsilon)
        for part, a, c in rows
    ]


def gap(
    specs: Sequence[FairnessSpec],
    masks: GroupMasks,
    y_true: Optional[np.ndarray],
    y_hat: np.ndarray,
) -> List[GapRecord]:
    """Per-spec (and per-part) violation values |F_0 - F_1| at y_hat."""
    records: List[GapRecord] = []
    for spec, label in zip(specs, unique_labels(specs)):
        records.extend(spec_gaps(spec, masks, y_true, y_hat, label))
    return records


# -- Config loading --


def _parse_regions(text: str) -> Tuple[Tuple[float, float], ...]:
    regions = []
    for token in text.replace(",", ";").split(";"):
        token = token.strip()
        if not token:
            continue
        if ":" in token:
            lo, hi = token.split(":", 1)
            regions.append((float(lo), float(hi)))
        else:
            regions.append((float(token), float(token)))
    return tuple(regions)


def _opt_float(section: configparser.SectionProxy, key: str) -> Optional[float]:
    raw = section.get(key, "").strip()
    return float(raw) if raw else None


def load_specs(
    parser: configparser.ConfigParser, default_epsilon: float = 0.0,
) -> List[FairnessSpec]:
    """FairnessSpecs from ``[spec.<name>]`` sections, in file order."""
    specs = []
    for section_name in parser.sections():
        if not section_name.startswith("spec."):
            continue
        section = parser[section_name]
        try:
            eps = _opt_float(section, "epsilon")
            specs.append(FairnessSpec(
                kind=SpecKind(section.get("kind", "").strip()),
                epsilon=default_epsilon if eps is None else eps,
                attribute=section.get("attribute", "").strip() or None,
                regions=_parse_regions(section.get("regions", "")),
                lower=_opt_float(section, "lower"),
                upper=_opt_float(section, "upper"),
                name=section_name[len("spec."):],
            ))
        except ValueError as exc:
            raise InvalidSpec(f"[{section_name}]: {exc}") from exc
    return specs


def spec_to_dict(spec: FairnessSpec) -> Dict[str, Any]:
    """JSON-friendly description, used for report provenance and config hashes."""
    out: Dict[str, Any] = {"kind": spec.kind.value, "epsilon": spec.epsilon, "name": spec.label}
    if spec.attribute:
        out["attribute"] = spec.attribute
    if spec.regions:
        out["regions"] = [list(r) for r in spec.regions]
    if spec.kind == SpecKind.BOX:
        out["lower"] = spec.lower
        out["upper"] = spec.upper
    if spec.kind == SpecKind.GENERIC_AFFINE:
        for key in ("A", "m1", "B", "m2"):
            value = getattr(spec, key)
            if value is not None:
                out[key] = np.asarray(value).tolist()
    return out


def mean_parity(attribute: str, epsilon: float, name: str = "") -> FairnessSpec:
    return FairnessSpec(SpecKind.MEAN_PARITY, epsilon, attribute=attribute, name=name)


def box(lower: float, upper: float, name: str = "") -> FairnessSpec:
    return FairnessSpec(SpecKind.BOX, 0.0, lower=lower, upper=upper, name=name)
