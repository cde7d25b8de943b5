"""Experiment reports: ranked result tables with provenance.

A report is three files sharing a stem:

- ``<name>.csv``: one row per (scenario, method, regime, repeat) cell with the
  fixed columns of ``REPORT_SCHEMA``.
- ``<name>.gaps.csv``: long-form per-spec, per-part gaps of every cell.
- ``<name>.meta.json``: timestamps, host, runtimes and the command line.

The CSV payloads hold nothing time- or host-dependent, so identical seeds give
byte-identical payloads.
"""

import hashlib
import json
import logging
import platform
import socket
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fairlayer.constraints import GapRecord
from fairlayer.state import write_json_atomic, write_text_atomic

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

REPORT_SCHEMA: Dict[str, str] = {
    "scenario": "int64",
    "method": "object",
    "b_train": "int64",
    "b_infer": "int64",
    "repeat": "int64",
    "seed": "int64",
    "lambda": "float64",
    "test_loss": "float64",
    "max_gap": "float64",
    "satisfied": "int64",
    "n_specs": "int64",
    "violation": "bool",
    "n_changed": "int64",
    "rank": "int64",
    "rel_loss_pct": "float64",
    "config_hash": "object",
}

GAP_COLUMNS = ("scenario", "method", "b_train", "b_infer", "repeat", "spec", "part", "value", "tolerance")
GROUP_KEYS = ["scenario", "b_train", "b_infer", "repeat"]
METHOD_ORDER = ("flayer", "projection", "penalty", "strict-penalty")


class SchemaError(ValueError):
    """Raised when a report frame does not match ``REPORT_SCHEMA``."""


@dataclass
class CellResult:
    scenario: int
    method: str
    b_train: int
    b_infer: int
    repeat: int
    seed: int
    lam: float
    # always a loss (MSE or BCE), so lower ranks better
    test_loss: float
    gaps: List[GapRecord]
    satisfied: int
    n_specs: int
    n_changed: int
    config_hash: str
    runtime: float = field(default=0.0, compare=False)

    @property
    def violation(self) -> bool:
        return self.satisfied < self.n_specs

    @property
    def max_gap(self) -> float:
        return max((g.value for g in self.gaps), default=0.0)

    @property
    def key(self) -> str:
        return f"s{self.scenario}/{self.method}/{self.b_train}:{self.b_infer}/r{self.repeat}"


def config_hash(*parts: Any) -> str:
    """Short sha256 of the JSON form of ``parts`` (sorted keys)."""
    blob = json.dumps(parts, sort_keys=True, default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"cannot hash {type(value).__name__}")


def _method_position(method: str) -> int:
    return METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER)


def to_frame(cells: Sequence[CellResult]) -> pd.DataFrame:
    """Report rows with ranks and loss relative to the flayer cell of each group."""
    rows = [{
        "scenario": c.scenario,
        "method": c.method,
        "b_train": c.b_train,
        "b_infer": c.b_infer,
        "repeat": c.repeat,
        "seed": c.seed,
        "lambda": c.lam,
        "test_loss": c.test_loss,
        "max_gap": c.max_gap,
        "satisfied": c.satisfied,
        "n_specs": c.n_specs,
        "violation": c.violation,
        "n_changed": c.n_changed,
        "config_hash": c.config_hash,
    } for c in cells]
    frame = pd.DataFrame(rows, columns=[k for k in REPORT_SCHEMA if k not in ("rank", "rel_loss_pct")])
    frame["_order"] = frame["method"].map(_method_position)
    frame = frame.sort_values(GROUP_KEYS + ["_order"], kind="stable").reset_index(drop=True)
    frame["rank"] = (
        frame.sort_values(GROUP_KEYS + ["test_loss", "_order"], kind="stable")
        .groupby(GROUP_KEYS, sort=False)
        .cumcount()
        .add(1)
    )
    frame["rel_loss_pct"] = relative_loss(frame)
    frame = frame.drop(columns="_order")
    return frame[list(REPORT_SCHEMA)].astype(REPORT_SCHEMA)


def relative_loss(frame: pd.DataFrame) -> pd.Series:
    """(L - F) / F * 100 against the flayer loss F of the same group; NaN without one."""
    reference = (
        frame[frame["method"] == "flayer"]
        .set_index(GROUP_KEYS)["test_loss"]
    )
    keys = pd.MultiIndex.from_frame(frame[GROUP_KEYS])
    flayer = reference.reindex(keys).to_numpy()
    return pd.Series((frame["test_loss"].to_numpy() - flayer) / flayer * 100.0, index=frame.index)


def gaps_frame(cells: Sequence[CellResult]) -> pd.DataFrame:
    rows = [
        (c.scenario, c.method, c.b_train, c.b_infer, c.repeat, g.spec, g.part, g.value, g.tolerance)
        for c in cells for g in c.gaps
    ]
    return pd.DataFrame(rows, columns=list(GAP_COLUMNS))


def validate_frame(frame: pd.DataFrame) -> None:
    if list(frame.columns) != list(REPORT_SCHEMA):
        raise SchemaError(f"columns {list(frame.columns)} do not match the report schema")
    for column, dtype in REPORT_SCHEMA.items():
        if str(frame[column].dtype) != dtype:
            raise SchemaError(f"column {column} has dtype {frame[column].dtype}, expected {dtype}")
    ranks = frame.groupby(GROUP_KEYS)["rank"].apply(lambda r: sorted(r) == list(range(1, len(r) + 1)))
    if not ranks.all():
        raise SchemaError("ranks are not a permutation within every group")
    if (frame["max_gap"] < 0).any():
        raise SchemaError("gaps must be nonnegative")


def write_report(
    cells: Sequence[CellResult],
    out_dir: Path,
    name: str,
    meta: Optional[Dict[str, Any]] = None,
) -> Tuple[Path, Path, Path]:
    """Write payload, gap table and metadata; returns their paths."""
    out_dir = Path(out_dir)
    frame = to_frame(cells)
    validate_frame(frame)
    payload = out_dir / f"{name}.csv"
    gaps_path = out_dir / f"{name}.gaps.csv"
    meta_path = out_dir / f"{name}.meta.json"
    write_text_atomic(payload, frame.to_csv(index=False, float_format=FLOAT_FORMAT))
    write_text_atomic(gaps_path, gaps_frame(cells).to_csv(index=False, float_format=FLOAT_FORMAT))

    doc = {
        "written_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "host": socket.gethostname(),
        "platform": platform.platform(),
        "python": sys.version.split()[0],
        "runtimes": {c.key: round(c.runtime, 3) for c in cells},
    }
    doc.update(meta or {})
    write_json_atomic(meta_path, doc)
    log.info("Wrote report %s (%d rows)", payload, len(frame))
    return payload, gaps_path, meta_path


def format_table(frame: pd.DataFrame) -> str:
    """Compact text table for the terminal."""
    view = frame[["scenario", "b_train", "b_infer", "method", "test_loss", "rel_loss_pct", "rank", "violation"]].copy()
    view["violation"] = view["violation"].map({True: "VIOLATED", False: ""})
    return view.to_string(index=False, float_format=lambda v: f"{v:.4f}")
