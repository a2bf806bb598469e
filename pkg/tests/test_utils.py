import pytest
import logging
import logging.handlers
import tempfile
import os
import numpy as np
import pandas as pd

from fbm_volterra.exceptions import ConfigError
from fbm_volterra.utils import (
    config_hash,
    read_csv_with_manifest,
    setup_logging,
    spawn_seeds,
    validate_hurst,
    validate_int_at_least,
    validate_positive,
    validate_probability_level,
    write_csv_with_manifest,
)


class TestUtils:

    def test_setup_logging_console_only(self):
        """Test logging setup with console only"""
        logger = setup_logging("DEBUG")

        assert isinstance(logger, logging.Logger)
        assert logger.name == "fbm_volterra"
        assert logger.level == logging.DEBUG
        assert len(logger.handlers) >= 1  # At least console handler

    def test_setup_logging_with_file(self):
        """Test logging setup with file handler"""
        with tempfile.NamedTemporaryFile(suffix=".log", delete=False) as temp_file:
            temp_path = temp_file.name

        logger = None
        try:
            logging.getLogger("fbm_volterra").handlers.clear()

            logger = setup_logging("INFO", log_file=temp_path)

            assert logger.level == logging.INFO
            file_handlers = [h for h in logger.handlers if isinstance(h, logging.FileHandler)]

            assert len(file_handlers) == 1
            assert file_handlers[0].baseFilename == os.path.abspath(temp_path)

        finally:
            if logger:
                for handler in list(logger.handlers):
                    handler.close()
                    logger.removeHandler(handler)

            if os.path.exists(temp_path):
                os.remove(temp_path)

    def test_setup_logging_no_duplicates(self):
        """Test that logging doesn't create duplicate handlers"""
        logger1 = setup_logging("INFO")
        handler_count_first = len(logger1.handlers)

        logger2 = setup_logging("WARNING")
        handler_count_second = len(logger2.handlers)

        assert handler_count_first == handler_count_second
        assert logger2.level == logging.WARNING

    def test_console_handler_writes_to_stderr(self, capsys):
        """Test that log records stay off standard output"""
        logger = setup_logging("INFO")
        logger.info("progress message")

        captured = capsys.readouterr()
        assert "progress message" not in captured.out

    def test_validate_hurst_valid(self):
        """Test Hurst validation with values inside (0, 1)"""
        assert validate_hurst(0.3) == 0.3
        assert validate_hurst("0.7") == 0.7

    @pytest.mark.parametrize("value", [0.0, 1.0, 1.2, -0.1, float("nan"), "abc"])
    def test_validate_hurst_invalid(self, value):
        """Test that invalid Hurst values name the field"""
        with pytest.raises(ConfigError, match="hurst") as excinfo:
            validate_hurst(value)

        assert excinfo.value.field == "hurst"

    def test_validate_positive(self):
        """Test positivity validation"""
        assert validate_positive(2, "horizon") == 2.0

        with pytest.raises(ConfigError, match="horizon"):
            validate_positive(0.0, "horizon")

    def test_validate_int_at_least(self):
        """Test integer lower-bound validation"""
        assert validate_int_at_least(16, 16, "steps") == 16
        assert validate_int_at_least(32.0, 16, "steps") == 32

        with pytest.raises(ConfigError, match="steps"):
            validate_int_at_least(8, 16, "steps")

        with pytest.raises(ConfigError, match="integer"):
            validate_int_at_least(16.5, 16, "steps")

        with pytest.raises(ConfigError):
            validate_int_at_least(True, 0, "seed")

    def test_validate_probability_level(self):
        """Test probability level validation"""
        assert validate_probability_level(0.01) == 0.01

        with pytest.raises(ConfigError, match="level"):
            validate_probability_level(1.5)

    def test_spawn_seeds_prefix_stable(self):
        """Test that child stream i does not depend on the number of siblings"""
        few = spawn_seeds(42, 3)
        many = spawn_seeds(42, 10)

        for a, b in zip(few, many):
            assert np.array_equal(np.random.default_rng(a).standard_normal(4),
                                  np.random.default_rng(b).standard_normal(4))

    def test_spawn_seeds_distinct_streams(self):
        """Test that sibling streams differ"""
        a, b = spawn_seeds(42, 2)

        assert not np.array_equal(np.random.default_rng(a).standard_normal(4),
                                  np.random.default_rng(b).standard_normal(4))

    def test_config_hash_stable_and_order_free(self):
        """Test config hash determinism"""
        h1 = config_hash({"a": 1, "b": [1, 2]})
        h2 = config_hash({"b": [1, 2], "a": 1})

        assert h1 == h2
        assert len(h1) == 64
        assert config_hash({"a": 2, "b": [1, 2]}) != h1

    def test_csv_with_manifest(self, tmp_path):
        """Test that CSVs start with manifest comment lines and read back"""
        df = pd.DataFrame({"n": [1, 2], "value": [0.5, 0.25]})
        path = write_csv_with_manifest(df, str(tmp_path / "sub" / "out.csv"), {"config_hash": "abc", "seed": 3})

        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
        assert first == "# config_hash=abc\n"

        loaded, manifest = read_csv_with_manifest(path)
        pd.testing.assert_frame_equal(loaded, df)
        assert manifest == {"config_hash": "abc", "seed": "3"}
