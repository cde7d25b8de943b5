"""SGD training for the four methods and their evaluation.

- ``flayer``: every training batch is projected onto its compiled constraint
  set in the forward pass and the loss gradient is pulled back through the
  KKT system in the backward pass.
- ``projection``: unconstrained training, the projection is applied only at
  inference time.
- ``penalty`` / ``strict-penalty``: the loss is augmented with
  ``lambda * sum |gap|`` (or squared gaps), with box bounds enforced by the
  sigmoid reparameterization ``lower + (upper - lower) * sigmoid(z)``. With
  ``lambda = 0`` there is no penalty and no box map, so the run is plain
  unconstrained training, step for step the same as ``projection``.
  ``strict-penalty`` clips the global gradient norm; its weight is large enough
  that unclipped steps saturate the sigmoid.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from fairlayer.backprop import build_jacobian
from fairlayer.constraints import (
    GAP_KINDS,
    FairLayerError,
    FairnessSpec,
    GapRecord,
    GroupMasks,
    compile,
    gap,
    gap_rows,
    unique_labels,
)
from fairlayer.datagen import Dataset, Split
from fairlayer.network import MLPModel, backward, forward, forward_with_cache, init_model, philox
from fairlayer.projection import Infeasible, SolverConfig, project

log = logging.getLogger(__name__)

STRICT_PENALTY_LAMBDA = 5000.0
STRICT_PENALTY_GRAD_NORM = 10.0
DEFAULT_LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
# Gaps within this of their tolerance count as satisfied (solver round-off)
SATISFACTION_SLACK = 1e-7
DESK_HIDDEN = (32, 32, 32)
DEEP_HIDDEN = (64,) * 15


class InfeasibleBatchConstraints(FairLayerError):
    """Raised when a batch's compiled constraint set has no feasible point."""


class Method(str, Enum):
    FLAYER = "flayer"
    PROJECTION = "projection"
    PENALTY = "penalty"
    STRICT_PENALTY = "strict-penalty"

    @property
    def penalized(self) -> bool:
        return self in (Method.PENALTY, Method.STRICT_PENALTY)


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.FLAYER
    learning_rate: float = 0.01
    decay: float = 0.66
    decay_patience: int = 8
    early_stop_patience: int = 25
    max_epochs: int = 100
    batch_size: int = 256
    loss: str = "mse"
    penalty_lambda: float = 0.0
    lambda_grid: Tuple[float, ...] = ()
    penalty_form: str = "absolute"
    box: Optional[Tuple[float, float]] = None
    stratified: bool = True
    hidden: Tuple[int, ...] = DESK_HIDDEN
    layer_norm: bool = False
    eval_batch_size: Optional[int] = None
    max_grad_norm: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        if self.learning_rate <= 0 or not 0 < self.decay <= 1:
            raise ValueError("learning rate must be > 0 and decay in (0, 1]")
        if min(self.decay_patience, self.early_stop_patience, self.max_epochs, self.batch_size) < 1:
            raise ValueError("patience, epochs and batch size must be at least 1")
        if self.penalty_lambda < 0 or any(lam < 0 for lam in self.lambda_grid):
            raise ValueError("penalty weights must be >= 0")
        if self.loss not in ("mse", "bce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.penalty_form not in ("absolute", "quadratic"):
            raise ValueError(f"unknown penalty form {self.penalty_form!r}")
        if self.box is not None and self.box[0] >= self.box[1]:
            raise ValueError(f"box bounds {self.box} must satisfy lower < upper")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")

    @classmethod
    def for_method(cls, method: "Method | str", **overrides) -> "TrainConfig":
        """Defaults per method; strict-penalty uses a fixed large weight."""
        method = Method(method)
        if method == Method.STRICT_PENALTY and overrides.get("penalty_lambda") is None:
            overrides["penalty_lambda"] = STRICT_PENALTY_LAMBDA
        if method == Method.STRICT_PENALTY and overrides.get("max_grad_norm") is None:
            overrides["max_grad_norm"] = STRICT_PENALTY_GRAD_NORM
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return cls(method=method, **overrides)

    @property
    def box_map(self) -> bool:
        """Whether outputs pass through the sigmoid box map in training and inference."""
        return self.method.penalized and self.penalty_lambda > 0 and self.box is not None and self.loss == "mse"

    @property
    def inference_mode(self) -> str:
        if self.method in (Method.FLAYER, Method.PROJECTION):
            return "project"
        return "reparam" if self.box_map else "raw"

    @property
    def validation_mode(self) -> str:
        return "raw" if self.method == Method.PROJECTION else self.inference_mode


def build_model(input_dim: int, cfg: TrainConfig) -> MLPModel:
    return init_model([input_dim, *cfg.hidden, 1], cfg.layer_norm, cfg.seed)


# -- Batching --


def make_batches(
    masks: GroupMasks,
    batch_size: int,
    rng: np.random.Generator,
    stratified: bool = True,
) -> List[np.ndarray]:
    """Shuffled index batches of roughly ``batch_size``.

    Stratified batching shuffles within each joint group and deals every group
    out across the batches in equal shares, so each batch keeps the split's
    group proportions.
    """
    n = masks.n
    count = max(1, int(round(n / batch_size)))
    if stratified and masks.attributes:
        key = masks.group_key()
        shares: List[List[np.ndarray]] = [[] for _ in range(count)]
        for g in np.unique(key):
            members = rng.permutation(np.flatnonzero(key == g))
            for j, part in enumerate(np.array_split(members, count)):
                shares[j].append(part)
        batches = [np.concatenate(parts) for parts in shares]
    else:
        batches = np.array_split(rng.permutation(n), count)
    return [batches[i] for i in rng.permutation(count)]


# -- Losses --


def base_loss(y_hat: np.ndarray, y: np.ndarray, kind: str = "mse") -> Tuple[float, np.ndarray]:
    """Mean loss and its gradient w.r.t. y_hat (logits for bce)."""
    n = y_hat.shape[0]
    if kind == "mse":
        residual = y_hat - y
        return float(np.mean(residual ** 2)), 2.0 * residual / n
    value = float(np.mean(np.logaddexp(0.0, y_hat) - y * y_hat))
    return value, (expit(y_hat) - y) / n


def penalty_terms(
    y_hat: np.ndarray,
    y_true: np.ndarray,
    masks: GroupMasks,
    specs: Sequence[FairnessSpec],
    form: str = "absolute",
) -> Tuple[float, np.ndarray]:
    """Sum of |gap| (or gap^2) over every gap-type spec, with its gradient."""
    total = 0.0
    grad = np.zeros_like(y_hat)
    for spec in specs:
        if spec.kind not in GAP_KINDS:
            continue
        for _, a, c in gap_rows(spec, masks[spec.attribute], y_true):
            g = float(a @ y_hat) - c
            if form == "absolute":
                total += abs(g)
                grad += np.sign(g) * a
            else:
                total += g * g
                grad += 2.0 * g * a
    return total, grad


def penalty_objective(
    y_hat: np.ndarray,
    y: np.ndarray,
    masks: GroupMasks,
    specs: Sequence[FairnessSpec],
    lam: float,
    loss: str = "mse",
    form: str = "absolute",
) -> float:
    """Base loss plus ``lam`` times the summed gap penalty."""
    value = base_loss(np.asarray(y_hat, dtype=float), np.asarray(y, dtype=float), loss)[0]
    if lam == 0:
        return value
    return value + lam * penalty_terms(np.asarray(y_hat, dtype=float), y, masks, specs, form)[0]


def reparameterize(z: np.ndarray, box: Tuple[float, float]) -> Tuple[np.ndarray, np.ndarray]:
    """(lower + (upper - lower) * sigmoid(z), elementwise derivative)."""
    lower, upper = box
    s = expit(z)
    return lower + (upper - lower) * s, (upper - lower) * s * (1.0 - s)


class BatchResult(NamedTuple):
    loss: float
    grads: List[np.ndarray]
    y_hat: np.ndarray


def loss_and_grad(
    model: MLPModel,
    X: np.ndarray,
    y: np.ndarray,
    masks: GroupMasks,
    specs: Sequence[FairnessSpec],
    cfg: TrainConfig,
    solver: Optional[SolverConfig] = None,
) -> BatchResult:
    """Training loss of one batch and its gradient for every parameter."""
    z, caches = forward_with_cache(model, X)

    if cfg.method == Method.FLAYER:
        C = compile(specs, masks, y, z.shape[0])
        try:
            result = project(z, C, solver)
        except Infeasible as exc:
            raise InfeasibleBatchConstraints(f"batch of {z.shape[0]}: {exc}") from exc
        y_hat = result.y_star
        loss, d_y = base_loss(y_hat, y, cfg.loss)
        dz = build_jacobian(result, C, solver).vjp(d_y)
        return BatchResult(loss, backward(model, caches, dz), y_hat)

    y_hat, dy_dz = z, None
    if cfg.box_map:
        y_hat, dy_dz = reparameterize(z, cfg.box)
    loss, d_y = base_loss(y_hat, y, cfg.loss)
    if cfg.method.penalized and cfg.penalty_lambda > 0:
        value, grad = penalty_terms(y_hat, y, masks, specs, cfg.penalty_form)
        loss += cfg.penalty_lambda * value
        d_y = d_y + cfg.penalty_lambda * grad
    dz = d_y if dy_dz is None else d_y * dy_dz
    return BatchResult(loss, backward(model, caches, dz), y_hat)


# -- Evaluation --


@dataclass
class EvalMetrics:
    mode: str
    loss: float
    accuracy: Optional[float]
    gaps: List[GapRecord]
    satisfied: int
    n_specs: int
    n_changed: int
    batch_feasible: bool
    predictions: np.ndarray = field(repr=False)

    @property
    def score(self) -> float:
        """MSE for regression, accuracy for classification."""
        return self.loss if self.accuracy is None else self.accuracy

    @property
    def all_satisfied(self) -> bool:
        return self.satisfied == self.n_specs

    @property
    def max_excess(self) -> float:
        return max((g.value - g.tolerance for g in self.gaps), default=0.0)


def _satisfied_count(specs: Sequence[FairnessSpec], records: List[GapRecord]) -> int:
    count = 0
    for label in unique_labels(specs):
        parts = [r for r in records if r.spec == label]
        if all(r.value <= r.tolerance + SATISFACTION_SLACK for r in parts):
            count += 1
    return count


def evaluate(
    model: MLPModel,
    data: Split,
    specs: Sequence[FairnessSpec],
    mode: str = "raw",
    cfg: Optional[TrainConfig] = None,
    solver: Optional[SolverConfig] = None,
    batch_size: Optional[int] = None,
    seed: int = 0,
) -> EvalMetrics:
    """Loss, per-spec gaps and satisfaction on one split.

    ``mode`` is ``raw`` (network output), ``reparam`` (sigmoid box map) or
    ``project`` (outputs projected per batch; ``batch_size=None`` projects the
    whole split at once, otherwise stratified batches are used).
    """
    cfg = cfg or TrainConfig()
    z = forward(model, data.X)
    y_hat = z.copy()
    batch_feasible = True

    if mode == "reparam":
        if cfg.box is None:
            raise ValueError("reparam evaluation needs box bounds")
        y_hat = reparameterize(z, cfg.box)[0]
    elif mode == "project":
        if batch_size is None:
            batches = [np.arange(z.shape[0])]
        else:
            batches = make_batches(data.masks, batch_size, philox(seed), stratified=True)
        for idx in batches:
            masks = data.masks.take(idx)
            C = compile(specs, masks, data.y[idx], idx.shape[0])
            try:
                result = project(z[idx], C, solver)
            except Infeasible as exc:
                raise InfeasibleBatchConstraints(f"evaluation batch of {idx.shape[0]}: {exc}") from exc
            y_hat[idx] = result.y_star
            batch_feasible &= C.violation(result.y_star) <= SATISFACTION_SLACK
    elif mode != "raw":
        raise ValueError(f"unknown inference mode {mode!r}")

    loss = base_loss(y_hat, data.y, cfg.loss)[0]
    accuracy = None
    if cfg.loss == "bce":
        accuracy = float(np.mean((y_hat > 0).astype(float) == data.y))
    records = gap(specs, data.masks, data.y, y_hat)
    return EvalMetrics(
        mode=mode,
        loss=loss,
        accuracy=accuracy,
        gaps=records,
        satisfied=_satisfied_count(specs, records),
        n_specs=len(specs),
        n_changed=int(np.sum(np.abs(y_hat - z) > 1e-9)),
        batch_feasible=bool(batch_feasible),
        predictions=y_hat,
    )


# -- Training loop --


def clip_gradients(grads: Sequence[np.ndarray], max_norm: Optional[float]) -> List[np.ndarray]:
    """Rescale ``grads`` so their joint Euclidean norm is at most ``max_norm``."""
    if max_norm is None:
        return list(grads)
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= max_norm:
        return list(grads)
    return [g * (max_norm / norm) for g in grads]


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    val_loss: float
    val_max_excess: float
    batches: int


@dataclass
class TrainingLog:
    method: str
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch].val_loss if self.records else float("nan")


def train(
    model: MLPModel,
    dataset: Dataset,
    specs: Sequence[FairnessSpec],
    cfg: TrainConfig,
    solver: Optional[SolverConfig] = None,
) -> Tuple[MLPModel, TrainingLog]:
    """Minibatch SGD with plateau learning-rate decay and early stopping.

    The parameters with the best validation loss are restored at the end.
    """
    train_split = dataset.part("train")
    val_split = dataset.part("val")
    rng = philox(cfg.seed)
    lr = cfg.learning_rate
    history = TrainingLog(method=cfg.method.value)
    best_loss, best_params = np.inf, model.copy_parameters()
    since_best = since_decay = 0

    for epoch in range(cfg.max_epochs):
        batches = make_batches(train_split.masks, cfg.batch_size, rng, cfg.stratified)
        losses = []
        for idx in batches:
            result = loss_and_grad(
                model,
                train_split.X[idx],
                train_split.y[idx],
                train_split.masks.take(idx),
                specs,
                cfg,
                solver,
            )
            grads = clip_gradients(result.grads, cfg.max_grad_norm)
            for param, grad in zip(model.parameters(), grads):
                param -= lr * grad
            losses.append(result.loss)

        val = evaluate(model, val_split, specs, cfg.validation_mode, cfg, solver)
        history.records.append(EpochRecord(
            epoch, lr, float(np.mean(losses)), val.loss, val.max_excess, len(batches),
        ))
        log.debug("%s epoch %d: train %.5f val %.5f lr %.3g", cfg.method.value, epoch, np.mean(losses), val.loss, lr)

        if val.loss < best_loss:
            best_loss, best_params = val.loss, model.copy_parameters()
            history.best_epoch = epoch
            since_best = since_decay = 0
        else:
            since_best += 1
            since_decay += 1
        if since_decay >= cfg.decay_patience:
            lr *= cfg.decay
            since_decay = 0
        if since_best >= cfg.early_stop_patience:
            history.stopped_early = True
            break

    model.load_parameters(best_params)
    log.info(
        "Trained %s for %d epochs, best validation loss %.5f at epoch %d",
        cfg.method.value, len(history.records), best_loss, history.best_epoch,
    )
    return model, history


# -- Penalty weight selection --


class LambdaTrial(NamedTuple):
    lam: float
    val_loss: float
    satisfied: bool


@dataclass
class LambdaSelection:
    lam: float
    violated: bool
    trials: List[LambdaTrial]
    model: MLPModel = field(repr=False)
    log: TrainingLog = field(repr=False)


def select_penalty_lambda(
    model_factory: Callable[[], MLPModel],
    dataset: Dataset,
    specs: Sequence[FairnessSpec],
    grid: Sequence[float],
    cfg: TrainConfig,
    solver: Optional[SolverConfig] = None,
) -> LambdaSelection:
    """Smallest grid weight whose validation gaps all meet their tolerance.

    Every grid weight is trained so the trials show where the threshold lies.
    If none qualifies the largest weight is returned with ``violated`` set.
    """
    grid = sorted(float(lam) for lam in grid)
    if not grid:
        raise ValueError("lambda grid must not be empty")
    val_split = dataset.part("val")
    trials: List[LambdaTrial] = []
    chosen = None
    last = None
    for lam in grid:
        trial_cfg = replace(cfg, penalty_lambda=lam)
        model, history = train(model_factory(), dataset, specs, trial_cfg, solver)
        metrics = evaluate(model, val_split, specs, trial_cfg.inference_mode, trial_cfg, solver)
        trials.append(LambdaTrial(lam, metrics.loss, metrics.all_satisfied))
        log.info("lambda=%g: validation loss %.5f, constraints %s", lam, metrics.loss,
                 "met" if metrics.all_satisfied else "violated")
        last = (lam, model, history)
        if metrics.all_satisfied and chosen is None:
            chosen = last
    if chosen is None:
        log.warning("No lambda in %s satisfies the constraints on validation", grid)
        return LambdaSelection(last[0], True, trials, last[1], last[2])
    return LambdaSelection(chosen[0], False, trials, chosen[1], chosen[2])
