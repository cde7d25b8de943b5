"""fairlayer entry point.

One-shot command per invocation: generates data, trains, streams, compares or
checks, writes its outputs under --out-dir, then exits with a documented code.
"""

import argparse
import configparser
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger("fairlayer")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_AGGREGATE = 5

DEFAULT_SLACK = 0.02
GLOBAL_DESTS = {"seed", "config", "out_dir", "threads"}
DESK_N, DESK_D = 4000, 30
DESK_REGIMES = ((256, 0),)
FULL_REGIMES = ((2000, 2000), (2000, 16), (256, 16))

try:
    from importlib.metadata import version as _pkg_version
    _VERSION = _pkg_version("fairlayer")
except Exception:
    _VERSION = "0.0.0"

_HELP = """\
Commands:
  datagen     Generate one synthetic scenario (CSV + descriptor)
  train       Train a model with one method and report test metrics
  stream      Run primal-dual fair inference over the test split
  compare     Train every method on several scenarios and rank them
  check       Run a seeded property suite

Exit codes:
  0 success, 1 property failure, 2 invalid arguments or config,
  3 I/O failure, 4 infeasible constraints during training,
  5 aggregate fairness guarantee not met
"""


class UsageError(Exception):
    """Invalid argument combination detected after parsing."""


# -- Argument parsing --


def _int_list(text: str) -> List[int]:
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def _float_list(text: str) -> List[float]:
    return [float(t) for t in text.replace(" ", "").split(",") if t]


def _regimes(text: str) -> List[Tuple[int, int]]:
    """``b_train:b_infer`` pairs; b_infer 0 (or ``full``) projects the whole split."""
    regimes = []
    for token in text.replace(" ", "").split(","):
        if not token:
            continue
        train_size, _, infer_size = token.partition(":")
        infer = 0 if infer_size in ("", "full") else int(infer_size)
        regimes.append((int(train_size), infer))
    return regimes


def build_parser() -> argparse.ArgumentParser:
    from fairlayer import config

    parser = argparse.ArgumentParser(
        prog="fairlayer",
        description="Fairness-constrained prediction layer: experiments and checks",
        epilog=_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-V", "--version", action="version", version=f"fairlayer {_VERSION}")
    parser.add_argument("--seed", type=int, default=config.SEED, help="base random seed")
    parser.add_argument("--config", default=None, help="INI file with [run] and [spec.*] sections")
    parser.add_argument("--out-dir", default=config.OUT_DIR, help="directory for outputs")
    parser.add_argument("--threads", type=int, default=config.THREADS, help="worker processes for compare")
    sub = parser.add_subparsers(dest="command", metavar="command")

    # Global flags are also accepted after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)

    p = sub.add_parser("datagen", parents=[common], help="generate one synthetic scenario")
    p.add_argument("--scenario", type=int, default=None, help="grid index 0-31")
    p.add_argument("--n", type=int, default=None, help="sample count override")
    p.add_argument("--d", type=int, default=None, help="feature count override")
    p.add_argument("--out", default=None, help="CSV path (default <out-dir>/scenario<k>.csv)")
    p.add_argument("--unstratified", action="store_true", help="split without stratifying by group")

    p = sub.add_parser("train", parents=[common], help="train one method")
    p.add_argument("--data", required=True, help="dataset CSV written by datagen")
    p.add_argument("--method", default="flayer", choices=["flayer", "projection", "penalty", "strict-penalty"])
    p.add_argument("--epsilon", type=float, default=config.EPSILON)
    p.add_argument("--lambda", dest="penalty_lambda", type=float, default=None, help="penalty weight")
    p.add_argument("--lambda-grid", type=_float_list, default=None, help="comma-separated weights to select from")
    p.add_argument("--penalty-form", default="absolute", choices=["absolute", "quadratic"])
    p.add_argument("--loss", default="mse", choices=["mse", "bce"])
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--eval-batch-size", type=int, default=0, help="0 projects the whole test split")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--hidden", type=_int_list, default=None, help="hidden widths, e.g. 32,32,32")
    p.add_argument("--deep", action="store_true", help="15 hidden layers with layer normalization")
    p.add_argument("--layer-norm", action="store_true")
    p.add_argument("--unstratified", action="store_true", help="plain shuffled training batches")
    p.add_argument("--model", default=None, help="model path (default <out-dir>/model-<method>.json)")

    p = sub.add_parser("stream", parents=[common], help="primal-dual inference over the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--eta", type=float, default=config.STREAM_ETA)
    p.add_argument("--b-tau", type=int, default=config.STREAM_B_TAU)
    p.add_argument("--epsilon", type=float, default=config.EPSILON)
    p.add_argument("--slack", type=float, default=DEFAULT_SLACK, help="finite-stream allowance over epsilon")
    p.add_argument("--passes", type=int, default=1, help="times the test split is replayed")
    p.add_argument("--exclude-missing", action="store_true",
                   help="leave batches missing a group out of the aggregate")
    p.add_argument("--log", default=None, help="stream log CSV (default <out-dir>/stream.csv)")
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default <out-dir>/stream.ckpt.json)")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    p.add_argument("--stop-after", type=int, default=None, help="checkpoint and stop after this many batches")

    p = sub.add_parser("compare", parents=[common], help="rank methods across scenarios")
    p.add_argument("--scenarios", type=_int_list, default=None, help="grid indices (default: one per quadrant)")
    p.add_argument("--methods", default="flayer,projection,penalty,strict-penalty")
    p.add_argument("--regimes", type=_regimes, default=None, help="b_train:b_infer pairs, e.g. 256:0,2000:16")
    p.add_argument("--n", type=int, default=DESK_N)
    p.add_argument("--d", type=int, default=DESK_D)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--hidden", type=_int_list, default=None)
    p.add_argument("--lambda-grid", type=_float_list, default=None)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--full", action="store_true", help="all 32 scenarios at full size and three regimes")
    p.add_argument("--name", default="compare", help="report file stem")

    from fairlayer.checks import SUITES
    p = sub.add_parser("check", parents=[common], help="run a property suite")
    p.add_argument("--suite", required=True, choices=[*SUITES, "all"])

    return parser


def _subparsers(parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def _coerce(value: str):
    lowered = value.strip().lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    return value


def apply_file_defaults(parser: argparse.ArgumentParser, values: Dict[str, str]) -> None:
    """Use ``[run]`` values as flag defaults; explicit flags still win."""
    for target in [parser, *_subparsers(parser).values()]:
        dests = {a.dest for a in target._actions}
        if target is not parser:
            dests -= GLOBAL_DESTS
        own = {k: _coerce(v) for k, v in values.items() if k in dests}
        if own:
            target.set_defaults(**own)


def parse_args(argv: Optional[Sequence[str]] = None) -> Tuple[argparse.Namespace, "object"]:
    """Parse twice: once to find --config, then with its [run] defaults."""
    from fairlayer import config

    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    file_config = config.read_config_file(known.config)

    parser = build_parser()
    apply_file_defaults(parser, config.run_defaults(file_config))
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        raise SystemExit(EXIT_USAGE)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    return args, file_config


def _specs_for(file_config, scenario, epsilon: float):
    from fairlayer.constraints import load_specs, mean_parity

    specs = load_specs(file_config, default_epsilon=epsilon)
    if specs:
        return specs
    if scenario is not None:
        return replace(scenario, epsilon=epsilon).specs()
    return [mean_parity("x1", epsilon, name="parity")]


def _box_of(specs) -> Optional[Tuple[float, float]]:
    from fairlayer.constraints import SpecKind

    for spec in specs:
        if spec.kind == SpecKind.BOX:
            return (spec.lower, spec.upper)
    return None


# -- datagen --


def _datagen(args, file_config) -> int:
    from fairlayer.datagen import ScenarioConfig, generate, save_dataset, scenario_grid

    if file_config.has_section("scenario"):
        fields = {}
        for key, raw in file_config.items("scenario"):
            default = getattr(ScenarioConfig, key, None)
            if default is None and key != "bias":
                raise UsageError(f"unknown scenario field {key!r}")
            fields[key] = type(default)(raw) if default is not None else float(raw)
        fields.setdefault("seed", args.seed)
        scenario = ScenarioConfig(**fields)
        if args.scenario is not None:
            log.warning("--scenario ignored: the config file defines [scenario]")
        label = "custom"
    else:
        if args.scenario is None or not 0 <= args.scenario < 32:
            raise UsageError("--scenario must be an integer in 0..31")
        scenario = scenario_grid(args.seed)[args.scenario]
        label = str(args.scenario)
    if args.n or args.d:
        scenario = scenario.scaled(args.n or scenario.n, args.d or scenario.d)

    dataset = generate(scenario, stratified=not args.unstratified)
    out = Path(args.out) if args.out else Path(args.out_dir) / f"scenario{label}.csv"
    descriptor = save_dataset(dataset, out)
    print(f"Scenario {label}: {scenario.describe()}")
    print(f"  n={dataset.n}  d={scenario.d}  group-1 fraction={dataset.groups.mean():.4f}")
    print(f"  wrote {out} and {descriptor}")
    return EXIT_OK


# -- train --


def _train(args, file_config) -> int:
    from fairlayer.datagen import load_dataset
    from fairlayer.network import save_model
    from fairlayer.reports import CellResult, config_hash, write_report
    from fairlayer.training import (
        DEEP_HIDDEN,
        DEFAULT_LAMBDA_GRID,
        Method,
        TrainConfig,
        build_model,
        evaluate,
        select_penalty_lambda,
        train,
    )
    from fairlayer.constraints import spec_to_dict

    dataset = load_dataset(Path(args.data))
    specs = _specs_for(file_config, dataset.scenario, args.epsilon)
    hidden = DEEP_HIDDEN if args.deep else args.hidden
    cfg = TrainConfig.for_method(
        args.method,
        learning_rate=args.lr,
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        loss=args.loss,
        penalty_lambda=args.penalty_lambda,
        penalty_form=args.penalty_form,
        box=_box_of(specs),
        stratified=not args.unstratified,
        hidden=tuple(hidden) if hidden else None,
        layer_norm=args.layer_norm or args.deep,
        seed=args.seed,
    )

    start = time.monotonic()
    lam = cfg.penalty_lambda if cfg.method.penalized else float("nan")
    if cfg.method == Method.PENALTY and (args.lambda_grid or args.penalty_lambda is None):
        grid = args.lambda_grid or list(DEFAULT_LAMBDA_GRID)
        selection = select_penalty_lambda(lambda: build_model(dataset.X.shape[1], cfg), dataset, specs, grid, cfg)
        for trial in selection.trials:
            print(f"  lambda={trial.lam:g}: val loss {trial.val_loss:.5f} "
                  f"{'ok' if trial.satisfied else 'violated'}")
        if selection.violated:
            print(f"  No lambda satisfied the constraints; using the largest ({selection.lam:g})")
        model, lam = selection.model, selection.lam
        cfg = replace(cfg, penalty_lambda=lam)
    else:
        model, _ = train(build_model(dataset.X.shape[1], cfg), dataset, specs, cfg)

    metrics = evaluate(model, dataset.part("test"), specs, cfg.inference_mode, cfg,
                       batch_size=args.eval_batch_size or None, seed=args.seed)
    runtime = time.monotonic() - start

    model_path = Path(args.model) if args.model else Path(args.out_dir) / f"model-{cfg.method.value}.json"
    save_model(model, model_path, extra={"method": cfg.method.value, "lambda": lam,
                                         "specs": [spec_to_dict(s) for s in specs]})
    cell = CellResult(
        scenario=-1, method=cfg.method.value, b_train=cfg.batch_size, b_infer=args.eval_batch_size,
        repeat=0, seed=args.seed, lam=lam, test_loss=metrics.loss, gaps=metrics.gaps,
        satisfied=metrics.satisfied, n_specs=metrics.n_specs, n_changed=metrics.n_changed,
        config_hash=config_hash(asdict(cfg), [spec_to_dict(s) for s in specs]), runtime=runtime,
    )
    write_report([cell], Path(args.out_dir), f"train-{cfg.method.value}", {"data": str(args.data)})

    print(f"{cfg.method.value}: test {'accuracy' if metrics.accuracy is not None else 'MSE'} "
          f"{metrics.score:.5f}, constraints satisfied {metrics.satisfied}/{metrics.n_specs}")
    for record in metrics.gaps:
        print(f"  {record.spec} {record.part}: gap {record.value:.6f} (tolerance {record.tolerance:g})")
    if cfg.method == Method.PROJECTION:
        print(f"  predictions changed by projection: {metrics.n_changed}")
    print(f"  model written to {model_path}")
    return EXIT_OK


# -- stream --


def _stream(args, file_config) -> int:
    from fairlayer.datagen import load_dataset
    from fairlayer.network import forward, load_model
    from fairlayer.streaming import (
        DualControllerState,
        StreamLog,
        aggregate_violation,
        load_checkpoint,
        save_checkpoint,
        step,
        violation_envelope,
    )
    from fairlayer.state import write_json_atomic

    if args.batch_size < 1 or args.passes < 1:
        raise UsageError("--batch-size and --passes must be at least 1")
    dataset = load_dataset(Path(args.data))
    model = load_model(Path(args.model))
    specs = _specs_for(file_config, dataset.scenario, args.epsilon)
    test = dataset.part("test")
    z_all = forward(model, test.X)
    order = np.tile(np.arange(z_all.shape[0]), args.passes)
    batches = [order[i:i + args.batch_size] for i in range(0, order.shape[0], args.batch_size)]

    out_dir = Path(args.out_dir)
    log_path = Path(args.log) if args.log else out_dir / "stream.csv"
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out_dir / "stream.ckpt.json"
    stream_log = StreamLog(log_path)

    if args.resume:
        state, position = load_checkpoint(ckpt_path)
        stream_log.truncate_to(len(state.records))
        log.info("Resuming stream at batch %d", position)
    else:
        if log_path.exists():
            log_path.unlink()
        state = DualControllerState(eta=args.eta, b_tau=args.b_tau, epsilon=args.epsilon,
                                    exclude_missing=args.exclude_missing)
        position = 0

    stop = len(batches) if args.stop_after is None else min(len(batches), position + args.stop_after)
    pending = []
    for index in range(position, stop):
        idx = batches[index]
        _, record = step(state, z_all[idx], test.masks.take(idx), specs, test.y[idx])
        pending.append(record)
        if (index + 1) % args.checkpoint_every == 0:
            stream_log.append(pending)
            pending = []
            save_checkpoint(state, ckpt_path, index + 1)
    stream_log.append(pending)
    save_checkpoint(state, ckpt_path, stop)

    if stop < len(batches):
        print(f"Stopped after batch {stop} of {len(batches)}; resume with --resume")
        return EXIT_OK

    average = aggregate_violation(state)
    envelope = violation_envelope(state)
    limit = state.epsilon + args.slack
    summary = {
        "batches": state.batches,
        "dual_updates": state.t,
        "aggregate_violation": average,
        "envelope": envelope,
        "final_lambda": state.lam,
        "epsilon": state.epsilon,
        "slack": args.slack,
        "passed": average <= limit,
    }
    write_json_atomic(out_dir / "stream.json", summary)
    print(f"Streamed {state.batches} batches of {args.batch_size} "
          f"({state.t} primal-dual, {state.batches - state.t} other)")
    print(f"  weighted average gap {average:.6f} (limit {limit:.6f}), envelope {envelope:.6f}")
    print(f"  final lambda {state.lam:.6g}; log written to {log_path}")
    if average > limit:
        print("  Aggregate fairness guarantee NOT met")
        return EXIT_AGGREGATE
    return EXIT_OK


# -- compare --


@dataclass
class Cell:
    index: int
    scenario_index: int
    scenario: object
    method: str
    b_train: int
    b_infer: int
    repeat: int
    seed: int
    epochs: int
    learning_rate: float
    hidden: Optional[Tuple[int, ...]]
    lambda_grid: Tuple[float, ...]
    epsilon: float
    specs: Optional[list] = None


def _run_cell(cell: Cell):
    """Train and evaluate one (scenario, method, regime, repeat) cell."""
    from fairlayer.constraints import spec_to_dict
    from fairlayer.datagen import generate
    from fairlayer.reports import CellResult, config_hash
    from fairlayer.training import Method, TrainConfig, build_model, evaluate, select_penalty_lambda, train

    start = time.monotonic()
    scenario = replace(cell.scenario, epsilon=cell.epsilon)
    dataset = generate(scenario)
    specs = cell.specs or scenario.specs()
    cfg = TrainConfig.for_method(
        cell.method,
        learning_rate=cell.learning_rate,
        max_epochs=cell.epochs,
        batch_size=cell.b_train,
        box=_box_of(specs),
        hidden=cell.hidden,
        seed=cell.seed,
    )
    lam = cfg.penalty_lambda if cfg.method.penalized else float("nan")
    if cfg.method == Method.PENALTY:
        selection = select_penalty_lambda(
            lambda: build_model(dataset.X.shape[1], cfg), dataset, specs, cell.lambda_grid, cfg,
        )
        model, lam = selection.model, selection.lam
        cfg = replace(cfg, penalty_lambda=lam)
    else:
        model, _ = train(build_model(dataset.X.shape[1], cfg), dataset, specs, cfg)
    metrics = evaluate(model, dataset.part("test"), specs, cfg.inference_mode, cfg,
                       batch_size=cell.b_infer or None, seed=cell.seed)
    return CellResult(
        scenario=cell.scenario_index, method=cell.method, b_train=cell.b_train, b_infer=cell.b_infer,
        repeat=cell.repeat, seed=cell.seed, lam=lam, test_loss=metrics.loss, gaps=metrics.gaps,
        satisfied=metrics.satisfied, n_specs=metrics.n_specs, n_changed=metrics.n_changed,
        config_hash=config_hash(asdict(scenario), asdict(cfg), [spec_to_dict(s) for s in specs]),
        runtime=time.monotonic() - start,
    )


def plan_cells(args, file_config) -> List[Cell]:
    from fairlayer.constraints import load_specs
    from fairlayer.datagen import derive_seed, quadrant_indices, scenario_grid
    from fairlayer.training import DEFAULT_LAMBDA_GRID

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = set(methods) - {"flayer", "projection", "penalty", "strict-penalty"}
    if unknown:
        raise UsageError(f"unknown methods: {', '.join(sorted(unknown))}")
    if args.full:
        log.warning("--full runs 32 scenarios at n=40000, d=150 in three regimes; expect hours")
        grid = scenario_grid(args.seed)
        indices = args.scenarios or list(range(32))
        regimes = args.regimes or list(FULL_REGIMES)
    else:
        grid = scenario_grid(args.seed, n=args.n, d=args.d)
        indices = args.scenarios if args.scenarios is not None else quadrant_indices()
        regimes = args.regimes or list(DESK_REGIMES)
    if any(not 0 <= i < 32 for i in indices):
        raise UsageError("scenario indices must lie in 0..31")
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")

    specs = load_specs(file_config, default_epsilon=args.epsilon) or None
    cells = []
    for i in indices:
        for b_train, b_infer in regimes:
            for repeat in range(args.repeats):
                scenario = grid[i]
                if repeat:
                    scenario = replace(scenario, seed=derive_seed(scenario.seed, repeat))
                for method in methods:
                    cells.append(Cell(
                        index=len(cells), scenario_index=i, scenario=scenario, method=method,
                        b_train=b_train, b_infer=b_infer, repeat=repeat,
                        seed=derive_seed(scenario.seed, 1000 + repeat),
                        epochs=args.epochs, learning_rate=args.lr,
                        hidden=tuple(args.hidden) if args.hidden else None,
                        lambda_grid=tuple(args.lambda_grid or DEFAULT_LAMBDA_GRID),
                        epsilon=args.epsilon, specs=specs,
                    ))
    return cells


def _compare(args, file_config) -> int:
    from fairlayer.reports import format_table, to_frame, write_report

    cells = plan_cells(args, file_config)
    print(f"Running {len(cells)} cells on {args.threads} worker(s)")
    results: Dict[int, object] = {}
    failure: Optional[BaseException] = None
    try:
        if args.threads > 1:
            with ProcessPoolExecutor(max_workers=args.threads) as pool:
                futures = {pool.submit(_run_cell, cell): cell.index for cell in cells}
                for future, index in futures.items():
                    results[index] = future.result()
        else:
            for cell in cells:
                results[cell.index] = _run_cell(cell)
                log.info("Finished cell %d/%d", cell.index + 1, len(cells))
    except BaseException as exc:
        failure = exc
    finally:
        ordered = [results[i] for i in sorted(results)]
        if ordered:
            meta = {"command": "compare", "cells_planned": len(cells), "partial": failure is not None}
            paths = write_report(ordered, Path(args.out_dir), args.name, meta)
            print(f"Wrote {paths[0]}")
    if failure is not None:
        raise failure

    frame = to_frame(ordered)
    print(format_table(frame))
    _desk_summary(frame)
    return EXIT_OK


def _desk_summary(frame) -> None:
    """Print the hard and soft comparison checks."""
    hard = frame[frame["method"].isin(["flayer", "projection"])]
    if len(hard):
        ok = int((~hard["violation"]).sum())
        print(f"F-Layer/Projection cells satisfying all constraints: {ok}/{len(hard)}")
    flayer = frame[frame["method"] == "flayer"].set_index(["scenario", "b_train", "b_infer", "repeat"])["test_loss"]
    proj = frame[frame["method"] == "projection"].set_index(["scenario", "b_train", "b_infer", "repeat"])["test_loss"]
    common = flayer.index.intersection(proj.index)
    if len(common):
        wins = int((flayer[common] <= 1.10 * proj[common]).sum())
        print(f"F-Layer MSE within 110% of Projection: {wins}/{len(common)}")
        if wins * 4 < 3 * len(common):
            log.warning(
                "F-Layer exceeded 110%% of Projection MSE in %d of %d cells (seeds %s)",
                len(common) - wins, len(common),
                sorted(frame.loc[frame["method"] == "flayer", "seed"].tolist()),
            )


# -- check --


def _check(args, file_config) -> int:
    from fairlayer.checks import SUITES, run_suite

    names = list(SUITES) if args.suite == "all" else [args.suite]
    passed = True
    for name in names:
        report = run_suite(name, args.seed)
        print(f"Suite {name} ({report.seconds:.1f}s)")
        for r in report.results:
            status = "PASS" if r.passed else "FAIL" if r.gating else "WARN"
            detail = f"  [{r.detail}]" if r.detail else ""
            print(f"  {status}  {r.name}: worst {r.worst:.3g} (threshold {r.threshold:g}){detail}")
        passed &= report.passed
    return EXIT_OK if passed else EXIT_CHECK_FAILED


# -- Entry points --


_COMMANDS = {
    "datagen": _datagen,
    "train": _train,
    "stream": _stream,
    "compare": _compare,
    "check": _check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from fairlayer import config
    from fairlayer.constraints import FairLayerError, InvalidSpec
    from fairlayer.datagen import InvalidConfig, InvalidRatios
    from fairlayer.network import ModelFormatError
    from fairlayer.projection import Infeasible
    from fairlayer.state import CorruptArtifact, acquire_lock, release_lock
    from fairlayer.training import InfeasibleBatchConstraints

    config.setup_logging()
    config.ensure_loaded()
    try:
        args, file_config = parse_args(argv)
    except FileNotFoundError as exc:
        print(f"Error: {exc}")
        return EXIT_USAGE
    except (InvalidSpec, ValueError, configparser.Error) as exc:
        print(f"Error: invalid config: {exc}")
        return EXIT_USAGE

    out_dir = Path(args.out_dir)
    locked = False
    try:
        if args.command != "check":
            if not acquire_lock(out_dir):
                print(f"Error: another fairlayer command is writing to {out_dir}")
                return EXIT_IO
            locked = True
        return _COMMANDS[args.command](args, file_config)
    except (OSError, CorruptArtifact, ModelFormatError) as exc:
        print(f"Error: I/O failure: {exc}")
        return EXIT_IO
    except (InfeasibleBatchConstraints, Infeasible) as exc:
        print(f"Error: infeasible constraints during training: {exc}")
        return EXIT_INFEASIBLE
    except (UsageError, InvalidSpec, InvalidConfig, InvalidRatios, ValueError) as exc:
        print(f"Error: {exc}")
        return EXIT_USAGE
    except FairLayerError as exc:
        print(f"Error: {exc}")
        return EXIT_USAGE
    finally:
        if locked:
            release_lock(out_dir)


def _main_wrapper():
    """Entry point with top-level error handling."""
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        sys.exit(130)
    except SystemExit:
        raise
    except Exception as _exc:
        print(f"\n  Unexpected error: {_exc}\n")
        sys.exit(1)


if __name__ == "__main__":
    _main_wrapper()
