"""
Logging utilities for the retinal laser MPC toolkit.

Every record carries the scenario it belongs to (``-`` outside a run), so
interleaved output of a parallel sweep stays attributable.
"""
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from loguru import logger

from ..config import config

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | "
    "<magenta>{extra[scenario]}</magenta> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - "
    "<level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {extra[scenario]} | {name}:{function}:{line} - {message}"


def setup_logger(level: Optional[str] = None, enqueue: bool = False):
    """Console sink plus rotating run and error files.

    ``enqueue`` routes records through a queue, needed when sweep workers
    share the sinks.
    """
    logger.remove()
    logger.configure(extra={"scenario": "-"})

    logger.add(
        sys.stdout,
        format=CONSOLE_FORMAT,
        level=level or config.logging.log_level,
        colorize=True,
        enqueue=enqueue,
    )

    for path, file_level, retention in (
        (config.logging.log_file, "DEBUG", "30 days"),
        (config.logging.error_log_file, "ERROR", "90 days"),
    ):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        logger.add(
            path,
            format=FILE_FORMAT,
            level=file_level,
            rotation="1 day",
            retention=retention,
            compression="zip",
            enqueue=enqueue,
        )


def get_logger(name: str):
    """Get a logger instance for a module."""
    return logger.bind(name=name)


@contextmanager
def scenario_context(name: str):
    """Tag every record emitted inside the block with the scenario name."""
    with logger.contextualize(scenario=name):
        yield


# Setup logger when module is imported
setup_logger()
