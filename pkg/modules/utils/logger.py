"""Logging utilities for the application."""

import logging
import sys
from pathlib import Path
from logging.handlers import RotatingFileHandler
from typing import Optional, Union

import colorlog

# Constants
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
COLOR_LOG_FORMAT = '%(log_color)s' + LOG_FORMAT
DEFAULT_LOG_LEVEL = logging.INFO
ROOT_LOGGER_NAME = 'modules'


class LoggerConfig:
    """Configuration for logger setup."""

    def __init__(self, log_dir: Optional[Union[str, Path]] = None, log_level: int = DEFAULT_LOG_LEVEL,
                 max_size_mb: int = 10, backup_count: int = 3, console_output: bool = True):
        """Initialize logger configuration.

        Args:
            log_dir (Path, optional): Directory for log files; no file handler when None
            log_level (int): Logging level (default: INFO)
            max_size_mb (int): Maximum size of log file in MB
            backup_count (int): Number of backup files to keep
            console_output (bool): Whether to output to standard error
        """
        self.log_dir = Path(log_dir) if log_dir else None
        self.log_level = log_level
        self.max_size_mb = max_size_mb
        self.backup_count = backup_count
        self.console_output = console_output


def setup_logger(name: str, config: Optional[LoggerConfig] = None) -> logging.Logger:
    """Set up a logger with optional rotating file output and coloured stderr output.

    Handlers are attached only once per logger name.

    Args:
        name (str): Logger name
        config (LoggerConfig, optional): Handler configuration

    Returns:
        logging.Logger: Configured logger instance
    """
    config = config or LoggerConfig()
    logger = logging.getLogger(name)
    logger.setLevel(config.log_level)

    if logger.handlers:
        return logger

    if config.log_dir is not None:
        config.log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            config.log_dir / f"{name}.log",
            maxBytes=config.max_size_mb * 1024 * 1024,
            backupCount=config.backup_count,
            encoding='utf-8'
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(file_handler)

    if config.console_output:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(colorlog.ColoredFormatter(
            COLOR_LOG_FORMAT,
            log_colors={
                'DEBUG': 'cyan',
                'INFO': 'green',
                'WARNING': 'yellow',
                'ERROR': 'red',
                'CRITICAL': 'bold_red',
            }
        ))
        logger.addHandler(console_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    """Get or create a logger by name.

    Module loggers live under the package root logger, so configuring the
    root once in the CLI is enough.

    Args:
        name (str): Logger name (usually ``__name__``)

    Returns:
        logging.Logger: Logger instance
    """
    return logging.getLogger(name)
