"""
Logging setup
=============

Stdlib logging carries the handlers (stderr, optional file), structlog
renders key-value events on top of it. Modules only call
``structlog.get_logger(__name__)``.
"""

import logging
import sys
from pathlib import Path
from typing import Optional, Union

import structlog


def configure_logging(level: str = "INFO", log_file: Optional[Union[str, Path]] = None) -> None:
    """
    Configure stdlib logging and structlog for a run

    Args:
        level (str): Log level name, e.g. ``"INFO"`` or ``"DEBUG"``
        log_file (str | Path | None): Also append log lines to this file
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(message)s",
        handlers=handlers,
        force=True,
    )

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            structlog.processors.KeyValueRenderer(
                key_order=["timestamp", "level", "logger", "event"], drop_missing=True
            ),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )
