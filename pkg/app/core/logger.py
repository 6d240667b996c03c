import logging
import sys
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path

from app.core.config import settings

ROOT_LOGGER = "diffseg"

# LOG_ROTATION -> (when, interval) for TimedRotatingFileHandler
ROTATIONS = {
    "daily": ("D", 1),
    "weekly": ("W0", 1),
    "monthly": ("D", 30),
}

QUIET_LIBRARIES = ("PIL", "matplotlib", "urllib3", "filelock")


def _file_handler(level: int, formatter: logging.Formatter) -> logging.Handler:
    path = Path(settings.LOG_FILE)
    path.parent.mkdir(parents=True, exist_ok=True)
    when, interval = ROTATIONS.get(settings.LOG_ROTATION.lower(), ROTATIONS["daily"])
    handler = TimedRotatingFileHandler(
        filename=str(path),
        when=when,
        interval=interval,
        backupCount=settings.LOG_RETENTION,
        encoding="utf-8",
    )
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def _console_handler(formatter: logging.Formatter) -> logging.Handler:
    handler = logging.StreamHandler(sys.stderr)
    # progress bars share stderr; production runs only surface problems
    handler.setLevel(logging.WARNING if settings.is_production else logging.INFO)
    handler.setFormatter(formatter)
    return handler


def setup_logging() -> logging.Logger:
    """
    Configure the project logger: a rotating log file plus stderr

    Child loggers from get_logger() propagate here; the project logger
    itself does not propagate to the root logger.
    """
    level = getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    formatter = logging.Formatter(settings.LOG_FORMAT)

    project = logging.getLogger(ROOT_LOGGER)
    project.setLevel(level)
    project.propagate = False
    project.handlers.clear()
    project.addHandler(_file_handler(level, formatter))
    project.addHandler(_console_handler(formatter))

    for name in QUIET_LIBRARIES:
        logging.getLogger(name).setLevel(logging.WARNING)

    return project


def get_logger(name: str = ROOT_LOGGER) -> logging.Logger:
    """Child of the project logger; module names such as "app.services.diffusion" are nested under it"""
    if name == ROOT_LOGGER or name.startswith(f"{ROOT_LOGGER}."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


logger = setup_logging()
logger.debug(f"Logging initialized - Level: {settings.LOG_LEVEL}, File: {settings.LOG_FILE}")

__all__ = ["logger", "get_logger", "setup_logging"]
