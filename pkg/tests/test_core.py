import pytest
import pandas as pd
from unittest.mock import Mock, patch

from fbm_volterra.config import ExperimentConfig
from fbm_volterra.core import VolterraLab
from fbm_volterra.exceptions import ConfigError
from fbm_volterra.experiments import ExperimentResult


def fake_result(passed=True):
    table = pd.DataFrame({"n": [10, 20], "value": [0.1, 0.05]})
    return ExperimentResult("fou-limit", table, passed, {"last_ratio": 0.99})


class TestVolterraLab:

    @patch("fbm_volterra.core.setup_logging")
    def test_initialization(self, mock_setup_logging):
        """Test VolterraLab initialization"""
        mock_logger = Mock()
        mock_setup_logging.return_value = mock_logger

        lab = VolterraLab()

        mock_setup_logging.assert_called_once_with("INFO", None)
        assert lab.logger == mock_logger
        assert mock_logger.info.call_count >= 3

    @patch("fbm_volterra.core.setup_logging")
    def test_initialization_with_custom_logging(self, mock_setup_logging):
        """Test initialization with custom logging settings"""
        VolterraLab(log_level="DEBUG", log_file="test.log")

        mock_setup_logging.assert_called_once_with("DEBUG", "test.log")

    @patch("fbm_volterra.core.setup_logging")
    def test_run_dispatches_to_runner(self, mock_setup_logging, sample_config):
        """Test that run calls the experiment's runner and times it"""
        mock_logger = Mock()
        mock_setup_logging.return_value = mock_logger
        runner = Mock(return_value=fake_result())

        with patch.dict("fbm_volterra.core.RUNNERS", {"fou-limit": runner}):
            result = VolterraLab().run(sample_config)

        runner.assert_called_once_with(sample_config)
        assert result.passed
        assert result.summary["seconds"] >= 0.0
        messages = [call.args[0] for call in mock_logger.info.call_args_list]
        assert "EXPERIMENT REPORT: fou-limit" in messages
        assert "✅ Acceptance checks passed" in messages

    @patch("fbm_volterra.core.setup_logging")
    def test_run_reports_failed_acceptance(self, mock_setup_logging, sample_config):
        """Test that a failed acceptance check is logged as a warning"""
        mock_logger = Mock()
        mock_setup_logging.return_value = mock_logger

        with patch.dict("fbm_volterra.core.RUNNERS", {"fou-limit": Mock(return_value=fake_result(False))}):
            result = VolterraLab().run(sample_config)

        assert not result.passed
        mock_logger.warning.assert_called_once_with("❌ Acceptance checks failed")

    @patch("fbm_volterra.core.setup_logging")
    def test_run_validates_first(self, mock_setup_logging):
        """Test that invalid settings never reach a runner"""
        runner = Mock()

        with patch.dict("fbm_volterra.core.RUNNERS", {"fou-limit": runner}):
            with pytest.raises(ConfigError, match="hurst"):
                VolterraLab().run(ExperimentConfig(experiment="fou-limit", hurst=1.5))

        runner.assert_not_called()

    @patch("fbm_volterra.core.setup_logging")
    def test_runner_errors_propagate(self, mock_setup_logging, sample_config):
        """Test that runtime errors are not swallowed"""
        runner = Mock(side_effect=FloatingPointError("overflow"))

        with patch.dict("fbm_volterra.core.RUNNERS", {"fou-limit": runner}):
            with pytest.raises(FloatingPointError, match="overflow"):
                VolterraLab().run(sample_config)

    @patch("fbm_volterra.core.os.cpu_count", return_value=8)
    @patch("fbm_volterra.core.setup_logging")
    def test_recommend_workers(self, mock_setup_logging, mock_cpu_count):
        """Test replication recommendations"""
        lab = VolterraLab()

        small = lab.recommend_workers(500)
        assert small == {"chunk_size": 50, "parallel": False, "workers": 2}

        large = lab.recommend_workers(20000)
        assert large == {"chunk_size": 500, "parallel": True, "workers": 8}

    @patch("fbm_volterra.core.os.cpu_count", return_value=1)
    @patch("fbm_volterra.core.setup_logging")
    def test_recommend_workers_single_cpu(self, mock_setup_logging, mock_cpu_count):
        """Test that one CPU never recommends parallel runs"""
        recommendations = VolterraLab().recommend_workers(5000)

        assert recommendations["parallel"] is False
        assert recommendations["workers"] == 1
        assert recommendations["chunk_size"] == 250
