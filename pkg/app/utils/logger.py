import logging
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger

_configured = False

CONSOLE_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
JSON_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


def setup_logging(level: str = "INFO", json_output: bool = False, stream: Optional[object] = None):
    """Configure the root logger once (console or line-delimited JSON)"""
    global _configured

    root = logging.getLogger()
    handler = logging.StreamHandler(stream or sys.stderr)
    if json_output:
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))

    if _configured:
        for old in list(root.handlers):
            root.removeHandler(old)
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    _configured = True
    return root
