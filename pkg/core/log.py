import logging
import sys
from typing import Optional, Union

from core.config import Config

LOG_FORMAT = "%(name)s: %(message)s"
ROOT = "stem"

_handler: Optional[logging.Handler] = None


class StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _value):
        pass


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"{ROOT}.{name}")


def setup_logging(level: Union[str, int, None] = None) -> logging.Logger:
    """Installs one stderr handler on the ``stem`` logger; stdout stays reserved for reports."""
    global _handler
    root = logging.getLogger(ROOT)
    if _handler is None:
        _handler = StderrHandler()
        _handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(_handler)
    root.setLevel(level if level is not None else Config.LOG_LEVEL.upper())
    return root
