"""Run configuration parsing, overrides and hashing."""
import json

import pytest

from backend.lab.config import (SEED_ENV, RunConfig, apply_overrides, hash_input, load_config, parse_config,
                                resolve_seed, resolved_dict)
from backend.lab.error_handler import EXIT_USAGE, ConfigurationError

MINIMAL = {"potential": {"preset": "cos_1d"}}


@pytest.mark.lab_test
class TestParsing:
    def test_defaults_are_filled(self):
        config = parse_config(MINIMAL)
        assert config.geometry.n_box == 2
        assert config.homogenize.eps == [1.0, 0.5, 0.25, 0.125]
        assert config.effective.estimators == ["derivative"]
        assert resolved_dict(config)["sampler"]["n_chains"] == 8

    @pytest.mark.parametrize("patch", [
        {"potential": {"preset": "cos_1d", "path": "p.json"}},
        {"potential": {}},
        {"unknown": 1},
        {"homogenize": {"eps": [0.0]}},
        {"homogenize": {"times": [1.0, 0.5]}},
        {"mixing": {"times": [0.0, 0.0]}},
        {"corrector": {"resolvent_lambdas": [0.5]}},
        {"effective": {"estimators": ["guess"]}},
        {"effective": {"n_max": 2}, "corrector": {"block_radius": 1.0}},
    ])
    def test_invalid_config(self, patch):
        with pytest.raises(ConfigurationError) as err:
            parse_config(dict(MINIMAL, **patch))
        assert err.value.exit_code == EXIT_USAGE

    def test_relative_potential_path(self, tmp_path):
        (tmp_path / "cfg").mkdir()
        path = tmp_path / "cfg" / "run.json"
        path.write_text(json.dumps({"potential": {"path": "pot.json"}}))
        config = load_config(path)
        assert config.potential.path == str((tmp_path / "cfg" / "pot.json").resolve())

    def test_unreadable_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_config(bad)
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "missing.json")


@pytest.mark.lab_test
class TestOverrides:
    def test_seed_precedence(self, monkeypatch):
        config = parse_config(dict(MINIMAL, seed=5))
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert resolve_seed(config) == 5
        monkeypatch.setenv(SEED_ENV, "11")
        assert resolve_seed(config) == 11
        assert resolve_seed(config, flag=2) == 2

    def test_bad_seed_variable(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "seven")
        with pytest.raises(ConfigurationError):
            resolve_seed(parse_config(MINIMAL))

    def test_overrides_and_workers(self, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        config = apply_overrides(parse_config(MINIMAL), seed=9, workers=4, out="elsewhere")
        assert (config.seed, config.workers, config.out) == (9, 4, "elsewhere")
        with pytest.raises(ConfigurationError):
            apply_overrides(parse_config(MINIMAL), workers=0)

    def test_hash_ignores_workers_and_out(self):
        base = parse_config(MINIMAL)
        moved = base.model_copy(update={"workers": 8, "out": "other"})
        assert hash_input(base) == hash_input(moved)
        assert "workers" not in hash_input(base)
        reseeded = base.model_copy(update={"seed": 1})
        assert hash_input(base) != hash_input(reseeded)

    def test_model_is_strict(self):
        assert RunConfig.model_config.get("extra") == "forbid"
