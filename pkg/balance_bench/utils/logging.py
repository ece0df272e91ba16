"""
Logging utilities for balance-bench.
"""

import logging
import json
import sys
from datetime import datetime, timezone
from typing import Dict, Any, Optional
from pathlib import Path

from rich.logging import RichHandler

# Attributes every LogRecord carries; anything else came in through `extra=`.
_RECORD_ATTRIBUTES = frozenset(vars(logging.LogRecord('', 0, '', 0, '', (), None)))


class JSONFormatter(logging.Formatter):
    """JSON formatter for structured logging."""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }

        if record.exc_info:
            log_entry['exception'] = self.formatException(record.exc_info)

        for key, value in record.__dict__.items():
            if key not in _RECORD_ATTRIBUTES and key not in ('message', 'asctime'):
                log_entry[key] = value

        return json.dumps(log_entry, default=str)


def setup_logging(
    level: str = "INFO",
    log_file: Optional[Path] = None,
    json_format: bool = True,
    console_output: bool = True
) -> logging.Logger:
    """
    Set up logging configuration.

    Console output goes to stderr; stdout is reserved for reports.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional log file path (always JSON lines)
        json_format: Whether console output is JSON; otherwise rich
        console_output: Whether to output to the console

    Returns:
        Configured root logger
    """
    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    numeric_level = getattr(logging, level.upper(), logging.INFO)
    root_logger.setLevel(numeric_level)

    if console_output:
        if json_format:
            console_handler: logging.Handler = logging.StreamHandler(sys.stderr)
            console_handler.setFormatter(JSONFormatter())
        else:
            console_handler = RichHandler(show_path=False, rich_tracebacks=True)
        root_logger.addHandler(console_handler)

    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(JSONFormatter())
        root_logger.addHandler(file_handler)

    return root_logger


def log_solve_end(
    logger: logging.Logger,
    n: int,
    iterations: int,
    objective: float,
    kkt_residual: float,
    support: int,
    **kwargs
) -> None:
    """Log completion of a weights QP solve."""
    logger.debug(
        "Weights QP solved",
        extra={
            'event': 'solve_end',
            'n': n,
            'iterations': iterations,
            'objective': objective,
            'kkt_residual': kkt_residual,
            'support': support,
            **kwargs
        }
    )


def log_restart_end(
    logger: logging.Logger,
    method: str,
    restart: int,
    objective: float,
    iterations: int,
    success: bool,
    **kwargs
) -> None:
    """Log completion of one learner restart."""
    logger.info(
        f"{method} restart {restart} finished: objective={objective:.6g}",
        extra={
            'event': 'restart_end',
            'method': method,
            'restart': restart,
            'objective': objective,
            'iterations': iterations,
            'success': success,
            **kwargs
        }
    )


def log_replication_progress(
    logger: logging.Logger,
    mode: str,
    completed: int,
    total: int
) -> None:
    """Log benchmark progress."""
    logger.info(
        f"{mode} benchmark: {completed}/{total} replications",
        extra={
            'event': 'replication_progress',
            'mode': mode,
            'completed': completed,
            'total': total
        }
    )


def log_fallback(
    logger: logging.Logger,
    reason: str,
    details: Dict[str, Any]
) -> None:
    """Log a numerical or statistical fallback."""
    logger.warning(
        f"Fallback applied: {reason}",
        extra={
            'event': 'fallback',
            'reason': reason,
            **details
        }
    )
