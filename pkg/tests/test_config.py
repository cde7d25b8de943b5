"""Tests for config module: env defaults, INI files, ensure_loaded."""

import logging

import pytest


class TestDefaults:
    def test_numeric_types(self):
        from fairlayer import config

        # These may be overridden by the user's .env, so just check types
        assert isinstance(config.SEED, int)
        assert isinstance(config.EPSILON, float)
        assert isinstance(config.STREAM_B_TAU, int)
        assert config.FEASIBILITY_TOL > 0


class TestConfigFile:
    def test_missing_path_gives_empty_parser(self):
        from fairlayer import config

        parser = config.read_config_file(None)
        assert parser.sections() == []
        assert config.run_defaults(parser) == {}

    def test_nonexistent_file(self, tmp_path):
        from fairlayer import config

        with pytest.raises(FileNotFoundError):
            config.read_config_file(str(tmp_path / "nope.ini"))

    def test_run_defaults_normalized(self, tmp_path):
        from fairlayer import config

        path = tmp_path / "exp.ini"
        path.write_text("[run]\nseed = 9\nout-dir = results\nb_tau = 16\n[spec.parity]\nkind = mean_parity\n")
        parser = config.read_config_file(str(path))
        assert config.run_defaults(parser) == {"seed": "9", "out_dir": "results", "b_tau": "16"}

    def test_percent_signs_are_literal(self, tmp_path):
        from fairlayer import config

        path = tmp_path / "exp.ini"
        path.write_text("[run]\nname = 100%\n")
        assert config.run_defaults(config.read_config_file(str(path))) == {"name": "100%"}


class TestEnsureLoaded:
    def test_succeeds_with_defaults(self, monkeypatch):
        from fairlayer import config

        monkeypatch.setattr(config, "_loaded", False)
        monkeypatch.setattr(config, "OUT_DIR", ".")
        config.ensure_loaded()
        assert config._loaded
        monkeypatch.setattr(config, "_loaded", False)

    def test_exits_on_nonpositive_tolerance(self, monkeypatch):
        from fairlayer import config

        monkeypatch.setattr(config, "_loaded", False)
        monkeypatch.setattr(config, "RIDGE", 0.0)
        with pytest.raises(SystemExit) as exc:
            config.ensure_loaded()
        assert exc.value.code == 2
        monkeypatch.setattr(config, "_loaded", False)

    def test_exits_on_negative_epsilon(self, monkeypatch):
        from fairlayer import config

        monkeypatch.setattr(config, "_loaded", False)
        monkeypatch.setattr(config, "EPSILON", -0.1)
        with pytest.raises(SystemExit):
            config.ensure_loaded()
        monkeypatch.setattr(config, "_loaded", False)

    def test_idempotent(self, monkeypatch):
        from fairlayer import config

        monkeypatch.setattr(config, "_loaded", True)
        monkeypatch.setattr(config, "RIDGE", -1.0)
        # Already validated, so the bad value is not re-checked
        config.ensure_loaded()
        monkeypatch.setattr(config, "_loaded", False)


class TestValidateOptional:
    def test_warns_on_large_epsilon(self, monkeypatch, caplog):
        from fairlayer import config

        monkeypatch.setattr(config, "EPSILON", 3.0)
        monkeypatch.setattr(config, "OUT_DIR", ".")
        with caplog.at_level(logging.WARNING):
            config._validate_optional()
        assert "FAIRLAYER_EPSILON=3.0 is large" in caplog.text

    def test_warns_on_missing_out_dir(self, monkeypatch, caplog, tmp_path):
        from fairlayer import config

        monkeypatch.setattr(config, "OUT_DIR", str(tmp_path / "missing"))
        with caplog.at_level(logging.WARNING):
            config._validate_optional()
        assert "FAIRLAYER_OUT_DIR does not exist" in caplog.text

    def test_warns_on_tiny_b_tau(self, monkeypatch, caplog):
        from fairlayer import config

        monkeypatch.setattr(config, "STREAM_B_TAU", 1)
        monkeypatch.setattr(config, "OUT_DIR", ".")
        with caplog.at_level(logging.WARNING):
            config._validate_optional()
        assert "hard projection branch" in caplog.text
