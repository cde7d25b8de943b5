import configparser
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Optional

from dotenv import load_dotenv

# Config directory: respects XDG_CONFIG_HOME, overridable with FAIRLAYER_CONFIG_DIR
CONFIG_DIR = Path(
    os.environ.get("FAIRLAYER_CONFIG_DIR", "")
    or (
        Path(os.environ.get("XDG_CONFIG_HOME", "") or Path.home() / ".config")
        / "fairlayer"
    )
)
CONFIG_DIR.mkdir(parents=True, exist_ok=True, mode=0o700)

# .env file: prefer CWD (for dev installs), then config dir
ENV_PATH = CONFIG_DIR / ".env"
if not ENV_PATH.exists() and (Path.cwd() / ".env").exists():
    ENV_PATH = Path.cwd() / ".env"

load_dotenv(ENV_PATH)


def _float(var: str, default: str) -> float:
    raw = os.environ.get(var, default).strip()
    try:
        return float(raw)
    except ValueError:
        print(f"Error: {var}={raw!r} is not a number. Fix it in {ENV_PATH}")
        sys.exit(2)


def _int(var: str, default: str) -> int:
    raw = os.environ.get(var, default).strip()
    try:
        return int(raw)
    except ValueError:
        print(f"Error: {var}={raw!r} is not an integer. Fix it in {ENV_PATH}")
        sys.exit(2)


LOG_LEVEL: str = os.environ.get("LOG_LEVEL", "INFO").strip().upper()

SEED: int = _int("FAIRLAYER_SEED", "0")
EPSILON: float = _float("FAIRLAYER_EPSILON", "0.05")
THREADS: int = _int("FAIRLAYER_THREADS", "1")
OUT_DIR: str = os.environ.get("FAIRLAYER_OUT_DIR", ".").strip() or "."

# Streaming controller defaults
STREAM_ETA: float = _float("FAIRLAYER_STREAM_ETA", "0.5")
STREAM_B_TAU: int = _int("FAIRLAYER_STREAM_B_TAU", "256")

# Projection solver tolerances
FEASIBILITY_TOL: float = _float("FAIRLAYER_FEASIBILITY_TOL", "1e-9")
ACTIVE_TOL: float = _float("FAIRLAYER_ACTIVE_TOL", "1e-8")
RIDGE: float = _float("FAIRLAYER_RIDGE", "1e-12")


_loaded = False


def ensure_loaded() -> None:
    """Validate numeric settings. Call at the start of main()."""
    global _loaded
    if _loaded:
        return
    _loaded = True
    for name in ("FEASIBILITY_TOL", "ACTIVE_TOL", "RIDGE", "STREAM_ETA"):
        if globals()[name] <= 0:
            print(f"Error: {name} must be positive (got {globals()[name]})")
            sys.exit(2)
    if THREADS < 1:
        print(f"Error: FAIRLAYER_THREADS must be at least 1 (got {THREADS})")
        sys.exit(2)
    if EPSILON < 0:
        print(f"Error: FAIRLAYER_EPSILON must be nonnegative (got {EPSILON})")
        sys.exit(2)
    _validate_optional()


def _validate_optional() -> None:
    """Log warnings for suspicious but usable values. Never exits."""
    log = logging.getLogger(__name__)

    if EPSILON > 1:
        log.warning(
            "FAIRLAYER_EPSILON=%s is large for standardized targets", EPSILON,
        )

    if STREAM_B_TAU < 2:
        log.warning(
            "FAIRLAYER_STREAM_B_TAU=%d: every batch takes the hard projection branch",
            STREAM_B_TAU,
        )

    if OUT_DIR and not Path(OUT_DIR).is_dir():
        log.warning("FAIRLAYER_OUT_DIR does not exist yet: %s", OUT_DIR)


def read_config_file(path: Optional[str]) -> configparser.ConfigParser:
    """Read an experiment INI file (``[run]`` flags, ``[spec.*]`` criteria).

    A missing path yields an empty parser so callers can treat "no file" and
    "empty file" alike.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if not path:
        return parser
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    parser.read(p, encoding="utf-8")
    return parser


def run_defaults(parser: configparser.ConfigParser) -> Dict[str, str]:
    """Flag defaults from the ``[run]`` section, keys normalized to dest names."""
    if not parser.has_section("run"):
        return {}
    return {k.replace("-", "_"): v for k, v in parser.items("run")}


LOG_FILE = CONFIG_DIR / "fairlayer.log"


_logging_configured = False


def setup_logging() -> None:
    """Configure logging for a command. Call once at each entry point.

    When stdout is a TTY and LOG_LEVEL != DEBUG, console shows only warnings
    while full INFO logging goes to a file. In non-TTY (batch jobs, CI) or
    DEBUG mode, everything goes to console.
    """
    global _logging_configured
    if _logging_configured:
        return
    _logging_configured = True

    level = getattr(logging, LOG_LEVEL, logging.INFO)

    if sys.stdout.isatty() and LOG_LEVEL != "DEBUG":
        # TTY: console gets warnings only, file gets everything
        root = logging.getLogger()
        root.setLevel(level)

        console = logging.StreamHandler()
        console.setLevel(logging.WARNING)
        console.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(console)

        file_handler = logging.FileHandler(LOG_FILE, encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(
            "%(asctime)s %(levelname)s %(name)s: %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        ))
        root.addHandler(file_handler)
    else:
        logging.basicConfig(
            level=level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
