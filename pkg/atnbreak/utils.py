#!/usr/bin/env python3
"""
Utilities for the atnbreak toolkit

Provides logging, the error hierarchy, fraction parsing, JSON-lines helpers,
config fingerprints and the bounded worker pool used by dataset-wide jobs.
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

from dotenv import load_dotenv

# ATNBREAK_* defaults from .env
load_dotenv()


def get_logger(name: str) -> logging.Logger:
    """Get configured logger with console and optional file output"""

    logger = logging.getLogger(name)

    if not logger.handlers:  # Avoid duplicate handlers
        level_name = os.getenv("ATNBREAK_LOG_LEVEL", "INFO").upper()
        level = getattr(logging, level_name, logging.INFO)
        logger.setLevel(level)

        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )

        # Console handler (stderr, stdout stays free for command output)
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        # File handler, disabled with ATNBREAK_LOG_DIR=""
        log_dir = os.getenv("ATNBREAK_LOG_DIR", "logs")
        if log_dir:
            logs_path = Path(log_dir)
            logs_path.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(logs_path / "atnbreak.log")
            file_handler.setLevel(level)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

        logger.propagate = False

    return logger


def set_verbosity(level: int) -> None:
    """Apply a log level to every atnbreak logger created so far"""
    for name, candidate in logging.Logger.manager.loggerDict.items():
        if name.startswith("atnbreak") and isinstance(candidate, logging.Logger):
            candidate.setLevel(level)
            for handler in candidate.handlers:
                handler.setLevel(level)


class AtnBreakError(Exception):
    """Base class for every error raised by the toolkit"""

    pass


class ShapeError(AtnBreakError, ValueError):
    """Operand extents do not fit the operation"""

    pass


class ComputationRecordError(AtnBreakError):
    """Node not in record, mixed records or a consumed record"""

    pass


class ConfigError(AtnBreakError, ValueError):
    """Invalid configuration value or unknown key (usage error)"""

    pass


class AttackDivergedError(AtnBreakError):
    """Non-finite loss during the perturbation optimisation"""

    pass


class TrainingDivergedError(AtnBreakError):
    """Non-finite loss during training"""

    pass


class EvaluationError(AtnBreakError):
    """Metric cannot be computed for the given inputs"""

    pass


class RetryableError(AtnBreakError):
    """Exception that should trigger retry logic"""

    pass


def parse_fraction(value: Any) -> float:
    """
    Parse a budget given as "8/255", "0.03" or a number

    Args:
        value: String fraction, decimal string or number

    Returns:
        Value as float64
    """
    if isinstance(value, bool):
        raise ConfigError(f"Invalid numeric value: {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"Invalid fraction or decimal: {value!r}")


def canonical_json(data: Any) -> str:
    """JSON with sorted keys and fixed separators, stable across runs"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def fingerprint(data: Any) -> str:
    """First 16 hex chars of the SHA-256 of the canonical JSON"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:16]


def ensure_directory(path) -> Path:
    """Ensure directory exists, create if not"""
    dir_path = Path(path)
    dir_path.mkdir(parents=True, exist_ok=True)
    return dir_path


def jsonl_line(row: Dict[str, Any]) -> str:
    """One JSON-lines row with sorted keys"""
    return json.dumps(row, sort_keys=True) + "\n"


def write_jsonl(path, rows: Iterable[Dict[str, Any]]) -> Path:
    """Write rows as JSON lines (sorted keys), replacing the file atomically"""
    from .persistence import atomic_write_bytes

    body = "".join(jsonl_line(row) for row in rows)
    return atomic_write_bytes(path, body.encode("utf-8"))


class JsonlStream:
    """
    Append-only JSON-lines writer for long runs

    Every row is flushed and fsynced as it is written, so an interrupted
    run leaves a parseable prefix behind.
    """

    def __init__(self, path):
        self.path = Path(path)
        ensure_directory(self.path.parent)
        self._file = open(self.path, "w", encoding="utf-8", newline="\n")

    def write(self, row: Dict[str, Any]) -> None:
        self._file.write(jsonl_line(row))
        self._file.flush()
        os.fsync(self._file.fileno())

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "JsonlStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path) -> List[Dict[str, Any]]:
    """Read a JSON-lines file, skipping blank lines"""
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def resolve_jobs(jobs: Optional[int]) -> int:
    """Worker count from the flag, else ATNBREAK_JOBS, else 1"""
    if jobs is None:
        env_value = os.getenv("ATNBREAK_JOBS", "").strip()
        if not env_value:
            return 1
        try:
            jobs = int(env_value)
        except ValueError:
            raise ConfigError(f"ATNBREAK_JOBS must be an integer, got {env_value!r}")
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    return jobs


def run_indexed(
    fn: Callable[..., Any], arg_sets: Sequence[tuple], jobs: int = 1
) -> List[Any]:
    """
    Run fn over argument tuples and return results in input order

    Args:
        fn: Picklable top-level function
        arg_sets: One argument tuple per job
        jobs: Worker processes; 1 runs in-process

    Returns:
        List of results, index-aligned with arg_sets
    """
    results: List[Any] = [None] * len(arg_sets)

    if jobs <= 1 or len(arg_sets) <= 1:
        for idx, args in enumerate(arg_sets):
            results[idx] = fn(*args)
        return results

    with ProcessPoolExecutor(max_workers=jobs) as executor:
        future_to_index = {
            executor.submit(fn, *args): idx for idx, args in enumerate(arg_sets)
        }
        for future in as_completed(future_to_index):
            results[future_to_index[future]] = future.result()

    return results
