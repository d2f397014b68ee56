"""
Loguru sinks for toolkit runs: a colourised stderr sink with elapsed run time
and a rotating file sink. Every record carries the run seed.
"""

import sys
from pathlib import Path
from typing import Optional, Union

from loguru import logger

CONSOLE_FORMAT = (
    "<green>{elapsed}</green> | <level>{level: <8}</level> | <cyan>seed {extra[seed]}</cyan> | "
    "<level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | seed={extra[seed]} | {name}:{function}:{line} - {message}"


def setup_logging(log_file: Union[str, Path] = "logs/swinct.log", level: str = "INFO", seed: Optional[int] = None):
    """Route loguru to stderr (stdout stays free for --json output) and to `log_file`."""
    log_path = Path(log_file)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    logger.remove()
    logger.configure(extra={"seed": "-" if seed is None else seed})
    logger.add(sys.stderr, format=CONSOLE_FORMAT, level=level, colorize=True, diagnose=level == "DEBUG")
    logger.add(
        log_path,
        format=FILE_FORMAT,
        level=level,
        rotation="10 MB",
        retention="7 days",
        compression="zip",
    )

    logger.debug(f"Logging to {log_path} at {level}")
