import os
import logging
from typing import Union

from dotenv import load_dotenv

from utils.errors import ConfigError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

THREADS_ENV = "WIDEN_MERGE_THREADS"
LOG_LEVEL_ENV = "WIDEN_MERGE_LOG_LEVEL"
SEED_ENV = "WIDEN_MERGE_SEED"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def default_seed() -> int:
    """Global DARE seed used when a recipe does not set one"""
    raw = os.getenv(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}")


def resolve_threads(value: Union[int, str]) -> int:
    """
    Turn a recipe's `threads` field into a worker count.

    Args:
        value: positive integer, or "auto" to use WIDEN_MERGE_THREADS / cpu count
    """
    if value == "auto":
        raw = os.getenv(THREADS_ENV)
        if raw:
            try:
                value = int(raw)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        else:
            value = os.cpu_count() or 1
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"threads must be a positive integer or 'auto', got {value!r}")
    return value


def setup_logging(verbosity: int = 0) -> None:
    """Configure root logging on stderr; verbosity > 0 means DEBUG, < 0 means WARNING"""
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    else:
        level = getattr(logging, os.getenv(LOG_LEVEL_ENV, "INFO").upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    logger.debug(f"[Config] logging level set to {logging.getLevelName(level)}")


__all__ = ['THREADS_ENV', 'LOG_LEVEL_ENV', 'SEED_ENV', 'default_seed', 'resolve_threads', 'setup_logging']
