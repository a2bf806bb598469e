import os
from typing import Any, Dict

import pandas as pd

from .config import ExperimentConfig
from .experiments import RUNNERS, ExperimentResult
from .utils import setup_logging


class VolterraLab:
    def __init__(self, log_level: str = "INFO", log_file: str = None):
        """
        Initialize the experiment runner

        Args:
            log_level: Log level (DEBUG, INFO, WARNING, ERROR)
            log_file: Path to log file (optional)
        """
        self.logger = setup_logging(log_level, log_file)

        self.logger.info("🚀 Initializing VolterraLab...")
        self.logger.info(f"🧪 Experiments: {', '.join(RUNNERS)}")
        self.logger.info(f"🖥️ CPUs available: {os.cpu_count() or 1}")

    def run(self, config: ExperimentConfig) -> ExperimentResult:
        """
        Run one experiment

        Args:
            config: Validated or raw experiment settings

        Returns:
            ExperimentResult with the result table and the acceptance flag
        """
        config.validate()
        self.logger.info(f"🎯 Starting experiment {config.experiment}...")
        self.logger.info(f"🔢 Seed: {config.seed}")
        if config.hurst is not None:
            self.logger.info(f"📐 Hurst parameter: {config.hurst}")
        if config.steps is not None:
            self.logger.info(f"📏 Grid steps: {config.steps}")
        self.logger.info(f"⚡ Sequential mode: {config.sequential}")
        if not config.sequential:
            self.logger.info(f"👥 Workers: {config.effective_workers}")

        start_time = pd.Timestamp.now()
        result = RUNNERS[config.experiment](config)
        duration = (pd.Timestamp.now() - start_time).total_seconds()
        result.summary["seconds"] = round(duration, 3)

        self.logger.info("=" * 50)
        self.logger.info(f"EXPERIMENT REPORT: {result.name}")
        self.logger.info("=" * 50)
        self.logger.info(f"⏱️ Total time: {duration:.2f} seconds")
        self.logger.info(f"📊 Result rows: {len(result.table)}")
        for key, value in result.summary.items():
            self.logger.info(f"   {key}: {value}")
        if result.passed:
            self.logger.info("✅ Acceptance checks passed")
        else:
            self.logger.warning("❌ Acceptance checks failed")
        self.logger.info("=" * 50)

        return result

    def recommend_workers(self, replications: int) -> Dict[str, Any]:
        """
        Return parallelism recommendations for a replication count
        """
        cpus = os.cpu_count() or 1
        recommendations = {
            "chunk_size": min(500, max(50, replications // 20)),
            "parallel": replications > 1000 and cpus > 1,
            "workers": min(cpus, max(2, replications // 1000)),
        }

        self.logger.info("💡 Replication recommendations:")
        self.logger.info(f"   Chunk size: {recommendations['chunk_size']}")
        self.logger.info(f"   Parallel processing: {recommendations['parallel']}")
        self.logger.info(f"   Workers: {recommendations['workers']}")

        return recommendations
