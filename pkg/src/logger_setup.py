#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Logging setup module providing colored loggers via coloredlogs.

Usage:
    from logger_setup import LoggerSetup
    logger = LoggerSetup.setup_logger(__name__)

Every logger created here is remembered so the CLI can flip all of them to
DEBUG with ``--verbose`` and a run can mirror them into its ``run.log``.
"""

import logging
from pathlib import Path
from typing import Dict, Optional

import coloredlogs

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%H:%M:%S"


class LoggerSetup:
    """
    A helper class to configure Python logging with colored logs.
    """

    _registry: Dict[str, logging.Logger] = {}
    _level: int = logging.INFO

    @staticmethod
    def setup_logger(name: str, level: Optional[int] = None) -> logging.Logger:
        """
        Sets up and returns a configured logger.

        Args:
            name (str): Name of the logger (usually __name__ or the class name).
            level (int): Logging level (DEBUG, INFO, etc.). Defaults to the
                process-wide level set via ``set_level``.

        Returns:
            logging.Logger: A configured logger instance.
        """
        logger = logging.getLogger(name)
        effective = LoggerSetup._level if level is None else level

        # coloredlogs adds one StreamHandler per install; only install once per name
        if name not in LoggerSetup._registry:
            coloredlogs.install(
                level=effective,
                logger=logger,
                fmt=LOG_FORMAT,
                datefmt=DATE_FORMAT,
            )
            LoggerSetup._registry[name] = logger
        else:
            logger.setLevel(effective)
            for handler in logger.handlers:
                handler.setLevel(effective)
        return logger

    @staticmethod
    def set_level(level: int) -> None:
        """Apply ``level`` to every logger created so far and to future ones."""
        LoggerSetup._level = level
        for logger in LoggerSetup._registry.values():
            logger.setLevel(level)
            for handler in logger.handlers:
                handler.setLevel(level)

    @staticmethod
    def attach_file(path: Path) -> logging.FileHandler:
        """
        Mirror every registered logger into ``path`` (plain text, no colors).

        Returns the handler so the caller can ``detach_file`` it when the run ends.
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(path, encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
        handler.setLevel(logging.DEBUG)
        for logger in LoggerSetup._registry.values():
            logger.addHandler(handler)
        return handler

    @staticmethod
    def detach_file(handler: logging.FileHandler) -> None:
        for logger in LoggerSetup._registry.values():
            if handler in logger.handlers:
                logger.removeHandler(handler)
        handler.close()
