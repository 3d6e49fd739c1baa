#!/usr/bin/env python3
"""
Command-line entry point for the speech entity linker.

Usage:
    python -m speech_linker.main <verb> [--config FILE]

Verbs: synth, build-kb, train-retriever, train-ner, train-linker,
run-track1, run-track2, eval.
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, load_config
from .pipeline import VERBS, PipelineError, run_verb
from .report import MetricsReport, render_text


logger = logging.getLogger(__name__)


def _setup_logging(logs_dir: Path = Path("logs")) -> Path:
    """
    Configure logging to both console and file.

    Creates a timestamped log file in the logs/ directory.

    Returns:
        Path to the log file.
    """
    logs_dir.mkdir(parents=True, exist_ok=True)

    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_file = logs_dir / f"run_{timestamp}.log"

    log_format = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
    date_format = "%Y-%m-%d %H:%M:%S"

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.INFO)

    # Console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(logging.Formatter(log_format, date_format))
    root_logger.addHandler(console_handler)

    # File handler
    file_handler = logging.FileHandler(log_file, encoding="utf-8")
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(logging.Formatter(log_format, date_format))
    root_logger.addHandler(file_handler)

    return log_file


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speech-linker",
        description="Entity recognition and linking for speech transcripts.",
    )
    parser.add_argument(
        "--logs-dir",
        type=Path,
        default=Path("logs"),
        help="Directory for the timestamped run log (default: logs)",
    )
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    for verb in VERBS:
        command = sub.add_parser(verb, help=f"Run the {verb} stage")
        command.add_argument(
            "--config",
            type=Path,
            default=None,
            help="Settings file with KEY=VALUE lines (defaults apply when omitted)",
        )
    return parser


def run(verb: str, config_path: Optional[Path]) -> int:
    """
    Load the configuration and run one verb.

    Returns:
        Process exit code: 0 on success, 1 on a configuration or stage error.
    """
    try:
        cfg = load_config(config_path)
        logger.info(f"Configuration loaded (fingerprint {cfg.fingerprint()[:12]})")
    except ConfigError as e:
        logger.error(f"[config] {e}")
        return 1

    try:
        result = run_verb(verb, cfg)
    except PipelineError as e:
        logger.error(str(e))
        return 1

    if isinstance(result, MetricsReport):
        for line in render_text(result).splitlines():
            logger.info(line)
    logger.info(f"{verb} finished")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Entry point for the CLI."""
    args = build_parser().parse_args(argv)
    log_file = _setup_logging(args.logs_dir)
    logger.info(f"Log file: {log_file.absolute()}")

    try:
        code = run(args.verb, args.config)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(130)
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        sys.exit(1)
    sys.exit(code)


if __name__ == "__main__":
    main()
