"""Command-line entry point: ``fbm-volterra <experiment> [flags]``.

Settings come from an optional key-value config file, overridden by flags.
Progress and logs go to standard error; standard output receives one JSON
summary line per run. Exit status is 0 on success, 2 when the experiment ran
but missed an acceptance threshold (outputs are kept), and 1 on a config or
runtime error (partial outputs are removed).
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

from . import __version__
from .config import EXPERIMENTS, ExperimentConfig
from .core import VolterraLab
from .exceptions import AcceptanceError, ConfigError
from .experiments import ExperimentResult
from .utils import setup_logging, write_csv_with_manifest

logger = logging.getLogger(__name__)

__all__ = ["ExperimentConfig", "build_parser", "load_config", "run", "main"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ACCEPTANCE = 2


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Key-value config file (flags win over its values)")
    common.add_argument("--seed", type=int, help="Root seed of every random stream")
    common.add_argument("--out", help="Output directory (default: results)")
    common.add_argument("--steps", type=int, help="Number of grid steps (at least 16)")
    common.add_argument("--hurst", type=float, help="Hurst parameter in (0, 1)")
    common.add_argument("--workers", type=int, help="Worker threads (default: available CPUs)")
    common.add_argument("--sequential", action="store_true", default=None,
                        help="Run replications in order on one thread (bit-exact)")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--log-file", dest="log_file", help="Path to a rotating log file")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbm-volterra",
        description="Volterra-kernel calculus for fractional Brownian motion: oracle-verified experiments",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="experiment", metavar="experiment")
    subparsers.required = True
    common = _common_flags()
    for name in EXPERIMENTS:
        subparsers.add_parser(name, parents=[common], help=f"Run the {name} experiment")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file values, then flag overrides, validated"""
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {key: getattr(args, key) for key in
                 ("seed", "out", "steps", "hurst", "workers", "sequential", "log_level", "log_file")}
    return config.with_overrides(experiment=args.experiment, **overrides).validate()


def _manifest_lines(config: ExperimentConfig) -> dict:
    return {"config_hash": config.hash(), "version": __version__, "seed": config.seed}


def write_outputs(result: ExperimentResult, config: ExperimentConfig, written: List[str]) -> List[str]:
    """Result CSVs and manifest.json under config.out; paths are appended to ``written`` as they appear"""
    header = _manifest_lines(config)
    tables = {config.experiment: result.table}
    tables.update({f"{config.experiment}_{name}": table for name, table in result.extra_tables.items()})
    for stem, table in tables.items():
        path = os.path.join(config.out, f"{stem}.csv")
        written.append(path)
        write_csv_with_manifest(table, path, header)
        logger.info(f"💾 Wrote {path} ({len(table)} rows)")

    manifest = dict(header)
    manifest.update({
        "experiment": config.experiment,
        "config": config.to_dict(),
        "passed": result.passed,
        "summary": {k: v for k, v in result.summary.items() if k != "seconds"},
        "files": [os.path.basename(p) for p in written],
    })
    path = os.path.join(config.out, "manifest.json")
    written.append(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return written


def remove_outputs(paths: Sequence[str]) -> None:
    for path in paths:
        if os.path.exists(path):
            os.remove(path)
            logger.debug(f"Removed partial output {path}")


def check_acceptance(result: ExperimentResult) -> None:
    if not result.passed:
        raise AcceptanceError(f"{result.name} missed its acceptance thresholds: {result.summary}")


def run(config: ExperimentConfig, lab: Optional[VolterraLab] = None) -> int:
    """Run one experiment and write its artifacts; returns the exit status"""
    lab = lab or VolterraLab(config.log_level, config.log_file)
    written: List[str] = []
    status = EXIT_OK
    result = None
    try:
        result = lab.run(config)
        write_outputs(result, config, written)
        check_acceptance(result)
    except AcceptanceError as exc:
        logger.error(f"❌ {exc}")
        status = EXIT_ACCEPTANCE
    except Exception as exc:
        logger.error(f"❌ {config.experiment} failed: {type(exc).__name__}: {exc}")
        remove_outputs(written)
        written = []
        status = EXIT_ERROR

    summary = {"experiment": config.experiment, "status": status, "seed": config.seed,
               "config_hash": config.hash(), "files": written}
    if result is not None:
        summary["passed"] = result.passed
        summary.update(result.summary)
    print(json.dumps(summary, sort_keys=True, default=str))
    return status


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as exc:
        setup_logging().error(f"❌ {exc}")
        print(json.dumps({"experiment": args.experiment, "status": EXIT_ERROR, "field": exc.field}))
        return EXIT_ERROR
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
