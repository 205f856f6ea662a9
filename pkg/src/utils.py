import json
import logging
import os
import tempfile
from dataclasses import dataclass, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

LOG_FORMAT = "[%(asctime)s] [%(levelname)-8s] %(name)s: %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logging(level: str | int = logging.INFO) -> None:
    """
    Configures the root logger once for the whole process.

    Args:
        level: A logging level or its name ("INFO", "DEBUG", ...).
    """
    if isinstance(level, str):
        level = logging.getLevelNamesMapping().get(level.upper(), logging.INFO)
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT, LOG_DATE_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)


def write_text_atomic(path: str | Path, text: str) -> None:
    """
    Writes `text` to `path` through a temporary file in the same directory,
    so readers never observe a half-written file.

    Args:
        path: Destination file.
        text: Full file contents.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def save_json(path: str | Path, data: Any) -> None:
    """
    Saves `data` as pretty-printed JSON with sorted keys.

    Args:
        path: Destination file.
        data: Any JSON-serializable object.
    """
    write_text_atomic(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_json(path: str | Path) -> Any:
    with open(path, "r") as f:
        return json.load(f)


def format_offset_ms(td_seconds: float) -> str:
    """
    Formats a time offset given in seconds as milliseconds.

    Returns:
        A string such as "19.86 ms".
    """
    return f"{td_seconds * 1e3:.2f} ms"


@dataclass
class Error:
    """Represents an error result."""

    message: str

    def __str__(self):
        return self.message


@dataclass
class Success:
    """Represents a non‐error result."""

    message: str
    payload: Any = None

    def __str__(self):
        return self.message


def to_jsonable(value: Any) -> Any:
    """Converts dataclasses, enums and numpy values into plain JSON types."""
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value
