"""Synthetic regression scenarios with a binary protected attribute.

Each dataset has a Bernoulli(p) protected column, blockwise-correlated Gaussian
features (some shifted toward the protected attribute), a linear or nonlinear
latent score, a group bias of +b / -b and Gaussian noise. Targets are
standardized and group 0 is rescaled by ``group0_scale``.

Column layout: ``x1`` is the protected attribute (raw 0/1), ``x2..x{d+1}`` are
the d features standardized on the training split, ``y`` is the target.
"""

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fairlayer.constraints import FairLayerError, FairnessSpec, GroupMasks, box, mean_parity
from fairlayer.network import philox
from fairlayer.state import read_json, write_json_atomic, write_text_atomic

log = logging.getLogger(__name__)

DESCRIPTOR_VERSION = 1
DEFAULT_RATIOS = (0.7, 0.06, 0.24)
SPLIT_NAMES = ("train", "val", "test")

# Group relevance is paired with the magnitude of the group bias
RELEVANCE_BIAS = {0.3: 3.0, 0.7: 6.0}

TIGHTNESS_BOUNDS = {
    "loose": (-3.5, 3.5),
    "tighter": (0.0, 3.5),
}


class InvalidConfig(FairLayerError):
    """Raised for scenario parameters outside their valid range."""


class InvalidRatios(FairLayerError):
    """Raised when split ratios are negative or do not sum to one."""


@dataclass(frozen=True)
class ScenarioConfig:
    p: float = 0.5
    relevance: float = 0.3
    sigma: float = 0.125
    tightness: str = "loose"
    structure: str = "linear"
    n: int = 40000
    d: int = 150
    rho: float = 0.3
    block_size: int = 20
    n_relevant: int = 50
    beta_support: int = 15
    n_interactions: int = 200
    bias: Optional[float] = None
    group0_scale: float = 0.85
    epsilon: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.p < 1:
            raise InvalidConfig(f"p must lie in (0, 1), got {self.p}")
        if self.n <= 0 or self.d <= 0:
            raise InvalidConfig(f"n and d must be positive, got n={self.n}, d={self.d}")
        if not 1 <= self.block_size <= self.d:
            raise InvalidConfig(f"block size {self.block_size} must lie in [1, d={self.d}]")
        if not -1.0 < self.rho < 1.0:
            raise InvalidConfig(f"rho must lie in (-1, 1), got {self.rho}")
        if self.n_relevant > self.d or self.beta_support > self.d:
            raise InvalidConfig("relevant-feature and beta-support counts must not exceed d")
        if self.sigma < 0:
            raise InvalidConfig(f"sigma must be >= 0, got {self.sigma}")
        if self.tightness not in TIGHTNESS_BOUNDS:
            raise InvalidConfig(f"unknown tightness {self.tightness!r}")
        if self.structure not in ("linear", "nonlinear"):
            raise InvalidConfig(f"unknown structure {self.structure!r}")
        if self.bias is None and self.relevance not in RELEVANCE_BIAS:
            raise InvalidConfig(f"relevance {self.relevance} has no paired bias; set bias explicitly")

    @property
    def bias_magnitude(self) -> float:
        return float(self.bias) if self.bias is not None else RELEVANCE_BIAS[self.relevance]

    @property
    def bounds(self) -> Tuple[float, float]:
        return TIGHTNESS_BOUNDS[self.tightness]

    def specs(self) -> List[FairnessSpec]:
        """Mean parity on the protected column plus the prediction box."""
        lower, upper = self.bounds
        return [
            mean_parity("x1", self.epsilon, name="parity"),
            box(lower, upper, name="bounds"),
        ]

    def scaled(self, n: int, d: int) -> "ScenarioConfig":
        """Shrink n and d, keeping block, relevant, support and pair counts proportional."""
        ratio = d / self.d

        def keep(count: int) -> int:
            return max(1, int(round(count * ratio)))

        return replace(
            self,
            n=n,
            d=d,
            block_size=min(d, keep(self.block_size)),
            n_relevant=min(d, keep(self.n_relevant)),
            beta_support=min(d, keep(self.beta_support)),
            n_interactions=keep(self.n_interactions),
        )

    def describe(self) -> str:
        return (
            f"p={self.p:g} relevance={self.relevance:g} sigma={self.sigma:g} "
            f"{self.tightness} {self.structure}"
        )


class Split(NamedTuple):
    X: np.ndarray
    y: np.ndarray
    masks: GroupMasks


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    protected: Tuple[int, ...] = (0,)
    splits: Dict[str, np.ndarray] = field(default_factory=dict)
    scenario: Optional[ScenarioConfig] = None
    y_raw: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def columns(self) -> List[str]:
        return [f"x{j + 1}" for j in range(self.X.shape[1])]

    @property
    def groups(self) -> np.ndarray:
        """Protected attribute of the first protected column."""
        return self.X[:, self.protected[0]].astype(int)

    def masks(self, idx: Optional[np.ndarray] = None) -> GroupMasks:
        X = self.X if idx is None else self.X[idx]
        return GroupMasks.from_columns(X, self.protected)

    def part(self, name: str) -> Split:
        try:
            idx = self.splits[name]
        except KeyError:
            raise KeyError(f"dataset has no {name!r} split") from None
        return Split(self.X[idx], self.y[idx], self.masks(idx))


# -- Generation --


def _block_cholesky(size: int, rho: float) -> np.ndarray:
    cov = np.full((size, size), rho)
    np.fill_diagonal(cov, 1.0)
    return np.linalg.cholesky(cov)


def _features(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    X = np.empty((cfg.n, cfg.d))
    for start in range(0, cfg.d, cfg.block_size):
        stop = min(start + cfg.block_size, cfg.d)
        L = _block_cholesky(stop - start, cfg.rho)
        X[:, start:stop] = rng.standard_normal((cfg.n, stop - start)) @ L.T
    return X


def _latent_score(cfg: ScenarioConfig, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    beta = np.zeros(cfg.d)
    support = rng.choice(cfg.d, size=cfg.beta_support, replace=False)
    beta[support] = rng.standard_normal(cfg.beta_support)
    linear = X @ beta
    if cfg.structure == "linear":
        return linear

    alpha = rng.normal(0.0, 0.4, size=cfg.d)
    if cfg.d < 2:
        pairs = np.zeros((0, 2), dtype=int)
    else:
        first = rng.integers(0, cfg.d, size=cfg.n_interactions)
        offset = rng.integers(1, cfg.d, size=cfg.n_interactions)
        pairs = np.column_stack([first, (first + offset) % cfg.d])
    gamma = rng.normal(0.0, 0.4, size=pairs.shape[0])
    interactions = (X[:, pairs[:, 0]] * X[:, pairs[:, 1]]) @ gamma
    return 0.7 * linear + 0.2 * (X ** 2) @ alpha + 0.1 * interactions


def _standardize_columns(X: np.ndarray, rows: np.ndarray, cols: Sequence[int]) -> None:
    stats = X[np.ix_(rows, cols)]
    mean = stats.mean(axis=0)
    std = stats.std(axis=0)
    std[std == 0] = 1.0
    X[:, cols] = (X[:, cols] - mean) / std


def generate(
    cfg: ScenarioConfig,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    stratified: bool = True,
) -> Dataset:
    """Draw one scenario. Deterministic for a given cfg (including seed)."""
    rng = philox(cfg.seed)
    attr = (rng.random(cfg.n) < cfg.p).astype(int)
    features = _features(cfg, rng)

    relevant = rng.choice(cfg.d, size=cfg.n_relevant, replace=False)
    features[:, relevant] += cfg.relevance * (2.0 * attr - 1.0)[:, None]

    score = _latent_score(cfg, features, rng)
    bias = np.where(attr == 0, cfg.bias_magnitude, -cfg.bias_magnitude)
    y_raw = score + bias + cfg.sigma * rng.standard_normal(cfg.n)

    y = (y_raw - y_raw.mean()) / y_raw.std()
    y[attr == 0] *= cfg.group0_scale

    X = np.column_stack([attr.astype(float), features])
    splits = split(attr, ratios, stratified, seed=cfg.seed)
    _standardize_columns(X, splits["train"], list(range(1, X.shape[1])))
    log.info(
        "Generated %s: n=%d d=%d group-1 fraction %.3f",
        cfg.describe(), cfg.n, cfg.d, attr.mean(),
    )
    return Dataset(X, y, (0,), splits, cfg, y_raw)


# -- Scenario grid --


GRID_FACTORS = (
    ("p", (0.2, 0.5)),
    ("relevance", (0.3, 0.7)),
    ("sigma", (0.125, 0.6)),
    ("tightness", ("loose", "tighter")),
    ("structure", ("linear", "nonlinear")),
)


def derive_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def scenario_grid(
    base_seed: int = 0, n: Optional[int] = None, d: Optional[int] = None,
) -> List[ScenarioConfig]:
    """The 32-cell full factorial, last factor varying fastest.

    Order: p, relevance, sigma, tightness, structure. Scenario ``i`` gets seed
    ``derive_seed(base_seed, i)``.
    """
    names = [name for name, _ in GRID_FACTORS]
    grid = []
    for index, values in enumerate(itertools.product(*(levels for _, levels in GRID_FACTORS))):
        cfg = ScenarioConfig(**dict(zip(names, values)), seed=derive_seed(base_seed, index))
        if n is not None or d is not None:
            cfg = cfg.scaled(n or cfg.n, d or cfg.d)
        grid.append(cfg)
    return grid


def quadrant_indices() -> List[int]:
    """One scenario per (tightness, structure) quadrant, other factors fixed."""
    picks = []
    for i, cfg in enumerate(scenario_grid()):
        if cfg.p == 0.5 and cfg.relevance == 0.3 and cfg.sigma == 0.125:
            picks.append(i)
    return picks


# -- Splitting --


def _split_counts(n: int, ratios: Sequence[float]) -> List[int]:
    raw = np.asarray(ratios, dtype=float) * n
    counts = np.floor(raw + 1e-9).astype(int)
    remainder = n - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts.tolist()


def split(
    groups: np.ndarray,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    stratified: bool = True,
    seed: int = 0,
) -> Dict[str, np.ndarray]:
    """Disjoint covering train/val/test indices over ``len(groups)`` rows.

    With ``stratified`` every group is split separately, so each split keeps
    the global group proportion up to one sample per group.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLIT_NAMES) or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios {ratios} must be three nonnegative values summing to 1")
    groups = np.asarray(groups)
    rng = philox(seed)
    strata = [np.flatnonzero(groups == g) for g in np.unique(groups)] if stratified else [np.arange(groups.shape[0])]

    parts: Dict[str, List[np.ndarray]] = {name: [] for name in SPLIT_NAMES}
    for members in strata:
        shuffled = rng.permutation(members)
        bounds = np.cumsum([0] + _split_counts(shuffled.shape[0], ratios))
        for name, lo, hi in zip(SPLIT_NAMES, bounds, bounds[1:]):
            parts[name].append(shuffled[lo:hi])
    return {name: np.sort(np.concatenate(chunks)) for name, chunks in parts.items()}


# -- Persistence --


def descriptor_path(csv_path: Path) -> Path:
    return Path(csv_path).with_suffix(".json")


def save_dataset(dataset: Dataset, path: Path) -> Path:
    """Write ``<path>`` (CSV, 17 significant digits) and its JSON descriptor."""
    path = Path(path)
    frame = pd.DataFrame(dataset.X, columns=dataset.columns)
    frame["y"] = dataset.y
    write_text_atomic(path, frame.to_csv(index=False, float_format="%.17g"))
    descriptor = {
        "format_version": DESCRIPTOR_VERSION,
        "columns": dataset.columns + ["y"],
        "protected": list(dataset.protected),
        "scenario": asdict(dataset.scenario) if dataset.scenario else None,
        "seed": dataset.scenario.seed if dataset.scenario else None,
        "splits": {name: idx.tolist() for name, idx in dataset.splits.items()},
    }
    write_json_atomic(descriptor_path(path), descriptor)
    log.info("Wrote dataset %s (%d rows)", path, dataset.n)
    return descriptor_path(path)


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    descriptor = read_json(descriptor_path(path))
    if descriptor.get("format_version") != DESCRIPTOR_VERSION:
        raise InvalidConfig(f"unsupported dataset descriptor version in {descriptor_path(path)}")
    frame = pd.read_csv(path, dtype=float, float_precision="round_trip")
    scenario = ScenarioConfig(**descriptor["scenario"]) if descriptor.get("scenario") else None
    return Dataset(
        X=frame.drop(columns=["y"]).to_numpy(),
        y=frame["y"].to_numpy(),
        protected=tuple(descriptor["protected"]),
        splits={name: np.asarray(idx, dtype=int) for name, idx in descriptor["splits"].items()},
        scenario=scenario,
    )
