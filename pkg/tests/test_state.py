"""Tests for artifact storage: atomic writes, corrupt-file handling, locking."""

import json
import os
from unittest.mock import patch

import pytest


class TestAtomicWrites:
    def test_json_round_trip(self, tmp_path):
        from fairlayer.state import read_json, write_json_atomic

        path = tmp_path / "nested" / "doc.json"
        write_json_atomic(path, {"lam": 0.95, "t": 3})
        assert read_json(path) == {"lam": 0.95, "t": 3}
        assert path.read_text().endswith("\n")

    def test_no_temp_files_left(self, tmp_path):
        from fairlayer.state import write_text_atomic

        write_text_atomic(tmp_path / "out.csv", "a,b\n1,2\n")
        assert [p.name for p in tmp_path.iterdir()] == ["out.csv"]

    def test_failed_write_keeps_old_file(self, tmp_path):
        from fairlayer.state import write_json_atomic

        path = tmp_path / "doc.json"
        write_json_atomic(path, {"ok": True})
        with pytest.raises(TypeError):
            write_json_atomic(path, {"bad": object()})
        assert json.loads(path.read_text()) == {"ok": True}
        assert [p.name for p in tmp_path.iterdir()] == ["doc.json"]


class TestCorruptArtifacts:
    def test_corrupt_json_raises(self, tmp_path):
        from fairlayer.state import CorruptArtifact, read_json

        path = tmp_path / "doc.json"
        path.write_text("{invalid json!!!")
        with pytest.raises(CorruptArtifact):
            read_json(path)
        assert path.exists()

    def test_corrupt_json_backed_up(self, tmp_path):
        from fairlayer.state import CorruptArtifact, read_json

        path = tmp_path / "doc.json"
        path.write_text("")
        with pytest.raises(CorruptArtifact):
            read_json(path, backup_corrupt=True)
        backup = tmp_path / "doc.json.bak"
        assert backup.exists()
        assert not path.exists()


class TestLocking:
    def test_acquire_and_release(self, tmp_path):
        from fairlayer.state import acquire_lock, release_lock

        assert acquire_lock(tmp_path) is True
        # Second acquire should fail (same process is alive)
        assert acquire_lock(tmp_path) is False
        release_lock(tmp_path)
        assert acquire_lock(tmp_path) is True
        release_lock(tmp_path)

    def test_release_idempotent(self, tmp_path):
        from fairlayer.state import release_lock

        release_lock(tmp_path)
        release_lock(None)

    def test_stale_lock_removed(self, tmp_path):
        from fairlayer.state import LOCK_NAME, acquire_lock, release_lock

        (tmp_path / LOCK_NAME).write_text("999999999")
        with patch("os.kill", side_effect=OSError("No such process")):
            assert acquire_lock(tmp_path) is True
        release_lock(tmp_path)

    def test_valid_lock_respected(self, tmp_path):
        from fairlayer.state import LOCK_NAME, acquire_lock

        lock = tmp_path / LOCK_NAME
        lock.write_text(str(os.getpid()))
        assert acquire_lock(tmp_path) is False
        lock.unlink()

    def test_creates_out_dir(self, tmp_path):
        from fairlayer.state import acquire_lock, release_lock

        out = tmp_path / "fresh"
        assert acquire_lock(out) is True
        assert out.is_dir()
        release_lock(out)
