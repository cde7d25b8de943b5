"""Persistent artifact storage for fairlayer.

Model documents, stream checkpoints and dataset descriptors are JSON files
written atomically (temp file + rename) so an interrupted command never leaves
a half-written artifact behind. An output-directory lock keeps two commands
from writing the same directory at once.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional

log = logging.getLogger(__name__)

LOCK_NAME = ".fairlayer.lock"


class CorruptArtifact(ValueError):
    """Raised when a JSON artifact cannot be parsed."""


def write_json_atomic(path: Path, data: Dict[str, Any]) -> None:
    """Write JSON atomically: write to temp file, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(
        dir=path.parent, prefix=f".{path.stem}_", suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(data, f, indent=2)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_text_atomic(path: Path, text: str) -> None:
    """Atomic counterpart of Path.write_text for CSV payloads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(
        dir=path.parent, prefix=f".{path.stem}_", suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def read_json(path: Path, backup_corrupt: bool = False) -> Dict[str, Any]:
    """Load a JSON artifact.

    With ``backup_corrupt`` a file that fails to parse is renamed to
    ``<name>.bak`` before ``CorruptArtifact`` is raised, so the next write
    does not destroy the evidence.
    """
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except (json.JSONDecodeError, ValueError) as exc:
        if backup_corrupt:
            backup = path.with_suffix(path.suffix + ".bak")
            path.rename(backup)
            log.warning("Backed up corrupt artifact to %s", backup)
        raise CorruptArtifact(f"{path}: {exc}") from exc


def _lock_path(out_dir: Path) -> Path:
    return Path(out_dir) / LOCK_NAME


def _try_create_lock(lock_path: Path) -> bool:
    """Attempt to create the lock file. Returns True if successful."""
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return True
    except FileExistsError:
        return False


def acquire_lock(out_dir: Path) -> bool:
    """Try to lock an output directory. Returns False if another run holds it.

    If the lock is held by a dead process (stale lock), it is removed and
    re-acquired.
    """
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    lock_path = _lock_path(out_dir)
    if _try_create_lock(lock_path):
        return True

    try:
        pid = int(lock_path.read_text().strip())
        os.kill(pid, 0)  # signal 0: check existence only
    except (ValueError, OSError):
        log.warning("Removing stale lock in %s (previous process died)", out_dir)
        try:
            lock_path.unlink()
        except FileNotFoundError:
            pass
        return _try_create_lock(lock_path)

    return False


def release_lock(out_dir: Optional[Path]) -> None:
    """Release the output-directory lock."""
    if out_dir is None:
        return
    try:
        _lock_path(out_dir).unlink()
    except FileNotFoundError:
        pass
