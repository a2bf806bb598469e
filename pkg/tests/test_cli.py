import json
import os

import pytest
import pandas as pd
from unittest.mock import Mock, patch

from fbm_volterra import __version__
from fbm_volterra import cli as cli_module
from fbm_volterra.cli import (
    EXIT_ACCEPTANCE,
    EXIT_ERROR,
    EXIT_OK,
    build_parser,
    load_config,
    main,
    run,
)
from fbm_volterra.config import EXPERIMENTS
from fbm_volterra.experiments import ExperimentResult
from fbm_volterra.utils import read_csv_with_manifest


def mock_lab(passed=True, extra=None):
    table = pd.DataFrame({"n": [50, 100], "ratio": [0.9, 0.97]})
    result = ExperimentResult("fou-limit", table, passed, {"last_ratio": 0.97, "seconds": 0.1}, extra or {})
    lab = Mock()
    lab.run.return_value = result
    return lab


def last_json_line(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


class TestParser:

    def test_subcommands(self):
        """Test that every experiment is a subcommand"""
        parser = build_parser()

        for name in EXPERIMENTS:
            assert parser.parse_args([name]).experiment == name

    def test_subcommand_required(self, capsys):
        """Test that a bare invocation is a usage error"""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_flags(self):
        """Test common flag parsing"""
        args = build_parser().parse_args(
            ["tree-local", "--seed", "3", "--steps", "32", "--hurst", "0.7", "--workers", "2",
             "--sequential", "--log-level", "DEBUG", "--out", "runs"]
        )

        assert args.seed == 3
        assert args.steps == 32
        assert args.hurst == 0.7
        assert args.workers == 2
        assert args.sequential is True
        assert args.log_level == "DEBUG"
        assert args.out == "runs"
        assert args.config is None

    def test_unset_flags_are_none(self):
        """Test that absent flags do not override config values"""
        args = build_parser().parse_args(["fou-limit"])

        assert args.sequential is None
        assert args.seed is None

    def test_version(self, capsys):
        """Test the version flag"""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["--version"])

        assert __version__ in capsys.readouterr().out


class TestLoadConfig:

    def test_flags_override_file(self, config_file):
        """Test that flags win over config file values"""
        args = build_parser().parse_args(["fou-limit", "--config", config_file, "--seed", "5"])
        config = load_config(args)

        assert config.seed == 5
        assert config.hurst == 0.7
        assert config.n_list == (50, 100, 200)
        assert config.sequential is True

    def test_subcommand_wins_over_file(self, config_file):
        """Test that the subcommand names the experiment"""
        args = build_parser().parse_args(["chaos-rate", "--config", config_file])

        assert load_config(args).experiment == "chaos-rate"


class TestRun:

    def test_success_writes_outputs(self, sample_config, capsys):
        """Test the artifacts and JSON summary of a passing run"""
        status = run(sample_config, lab=mock_lab())

        assert status == EXIT_OK
        csv_path = os.path.join(sample_config.out, "fou-limit.csv")
        with open(csv_path, encoding="utf-8") as fh:
            assert fh.readline().startswith("# config_hash=")

        df, manifest = read_csv_with_manifest(csv_path)
        assert list(df.columns) == ["n", "ratio"]
        assert manifest["seed"] == "7"
        assert manifest["version"] == __version__

        summary = last_json_line(capsys)
        assert summary["status"] == EXIT_OK
        assert summary["passed"] is True
        assert summary["config_hash"] == sample_config.hash()
        assert summary["last_ratio"] == 0.97

    def test_manifest_json(self, sample_config):
        """Test manifest.json contents"""
        run(sample_config, lab=mock_lab(extra={"hierarchy": pd.DataFrame({"l": [0, 1]})}))

        with open(os.path.join(sample_config.out, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)

        assert manifest["experiment"] == "fou-limit"
        assert manifest["config_hash"] == sample_config.hash()
        assert manifest["files"] == ["fou-limit.csv", "fou-limit_hierarchy.csv"]
        assert manifest["passed"] is True
        assert "seconds" not in manifest["summary"]
        assert manifest["config"]["hurst"] == 0.7

    def test_failed_acceptance_keeps_outputs(self, sample_config, capsys):
        """Test exit status 2 with outputs kept when a threshold is missed"""
        status = run(sample_config, lab=mock_lab(passed=False))

        assert status == EXIT_ACCEPTANCE
        assert os.path.exists(os.path.join(sample_config.out, "fou-limit.csv"))
        assert os.path.exists(os.path.join(sample_config.out, "manifest.json"))
        summary = last_json_line(capsys)
        assert summary["status"] == EXIT_ACCEPTANCE
        assert summary["passed"] is False
        assert len(summary["files"]) == 2

    def test_runtime_error_removes_outputs(self, sample_config, capsys):
        """Test exit status 1 with partial outputs removed"""
        with patch("fbm_volterra.cli.check_acceptance", side_effect=RuntimeError("boom")):
            status = run(sample_config, lab=mock_lab())

        assert status == EXIT_ERROR
        assert not os.path.exists(os.path.join(sample_config.out, "fou-limit.csv"))
        assert not os.path.exists(os.path.join(sample_config.out, "manifest.json"))
        assert last_json_line(capsys)["files"] == []

    def test_runner_error(self, sample_config, capsys):
        """Test that a failing experiment writes nothing"""
        lab = Mock()
        lab.run.side_effect = FloatingPointError("overflow")

        assert run(sample_config, lab=lab) == EXIT_ERROR
        summary = last_json_line(capsys)
        assert summary["status"] == EXIT_ERROR
        assert "passed" not in summary


class TestMain:

    def test_config_error_exit(self, capsys):
        """Test that an invalid flag exits 1 naming the field"""
        status = main(["fou-limit", "--hurst", "1.2"])

        assert status == EXIT_ERROR
        summary = last_json_line(capsys)
        assert summary == {"experiment": "fou-limit", "status": EXIT_ERROR, "field": "hurst"}

    def test_missing_config_file(self, tmp_path, capsys):
        """Test that a missing config file is a config error"""
        status = main(["fou-limit", "--config", str(tmp_path / "missing.env")])

        assert status == EXIT_ERROR
        assert last_json_line(capsys)["field"] == "config"

    @patch("fbm_volterra.cli.run", return_value=EXIT_OK)
    def test_runs_loaded_config(self, mock_run, tmp_path):
        """Test that main hands the validated config to run"""
        status = main(["fou-limit", "--seed", "4", "--out", str(tmp_path), "--sequential"])

        assert status == EXIT_OK
        config = mock_run.call_args[0][0]
        assert config.experiment == "fou-limit"
        assert config.seed == 4
        assert config.sequential is True

    def test_missed_threshold_exits_two(self, mocker, tmp_path, capsys):
        """Test that main exits 2 and keeps the artifacts when the runner misses a threshold"""
        table = pd.DataFrame({"n": [50, 100], "ratio": [0.8, 0.85]})
        runner = mocker.Mock(return_value=ExperimentResult("fou-limit", table, False, {"last_ratio": 0.85}))
        mocker.patch.dict("fbm_volterra.core.RUNNERS", {"fou-limit": runner})
        error_spy = mocker.spy(cli_module.logger, "error")

        status = main(["fou-limit", "--out", str(tmp_path), "--sequential"])

        assert status == EXIT_ACCEPTANCE
        runner.assert_called_once()
        assert (tmp_path / "fou-limit.csv").exists()
        assert (tmp_path / "manifest.json").exists()
        assert "missed its acceptance thresholds" in error_spy.call_args[0][0]
        summary = last_json_line(capsys)
        assert summary["status"] == EXIT_ACCEPTANCE
        assert summary["passed"] is False
