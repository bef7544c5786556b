"""
Structured logging configuration.
"""
import logging
import sys
from pythonjsonlogger import jsonlogger
from .config import settings

PROGRESS_LOGGER = "mcsd.progress"


def setup_logging(level: str = None):
    """Configure structured JSON logging on stderr."""
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, level or settings.LOG_LEVEL))

    handler = logging.StreamHandler(sys.stderr)
    if settings.LOG_JSON:
        formatter = jsonlogger.JsonFormatter(
            '%(asctime)s %(name)s %(levelname)s %(message)s',
            timestamp=True
        )
    else:
        formatter = logging.Formatter('%(asctime)s %(name)s %(levelname)s %(message)s')
    handler.setFormatter(formatter)

    # Re-running setup (CLI invoked repeatedly in one process) must not stack handlers
    for existing in list(logger.handlers):
        if getattr(existing, "_mcsd_handler", False):
            logger.removeHandler(existing)
    handler._mcsd_handler = True
    logger.addHandler(handler)

    return logger


def setup_progress_logging(stream=None):
    """
    Configure the training progress stream.

    Progress events are line-delimited JSON on stdout, one object per event,
    independent of the diagnostic log level.
    """
    progress = logging.getLogger(PROGRESS_LOGGER)
    progress.setLevel(logging.INFO)
    progress.propagate = False

    for existing in list(progress.handlers):
        progress.removeHandler(existing)

    handler = logging.StreamHandler(stream or sys.stdout)
    handler.setFormatter(jsonlogger.JsonFormatter('%(message)s'))
    progress.addHandler(handler)

    return progress
