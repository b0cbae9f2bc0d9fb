import json
import os
import re
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

ENDPOINT_PATTERN = re.compile(
    r"^(?:unix:(?P<path>/.+)|tcp:(?P<host>[^:]+):(?P<port>\d+)|kernel:(?P<device>/dev/nbd\d+)|(?P<loopback>loopback))$"
)


JsonObject = Dict[str, Any]


def read_json_object(file_path: str) -> Optional[JsonObject]:
    """Parsed JSON object, or None when the file is missing, torn or not an object"""
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (FileNotFoundError, UnicodeDecodeError, json.JSONDecodeError):
        return None
    return data if isinstance(data, dict) else None


def write_json_object(file_path: str, data: Mapping[str, Any]):
    """Replace file_path with data in one rename, contents synced first"""
    parent = os.path.dirname(file_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    staging = file_path + ".tmp"
    with open(staging, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.flush()
        os.fsync(f.fileno())
    os.replace(staging, file_path)


def format_size(nbytes: float) -> str:
    """Format a byte count in binary units"""
    for unit in ("B", "KiB", "MiB", "GiB"):
        if abs(nbytes) < 1024 or unit == "GiB":
            return f"{nbytes:.0f} {unit}" if unit == "B" else f"{nbytes:.1f} {unit}"
        nbytes /= 1024
    return f"{nbytes:.1f} GiB"


def validate_endpoint(endpoint: str) -> bool:
    """Validate a listen endpoint descriptor"""
    return bool(ENDPOINT_PATTERN.match(endpoint))


def parse_endpoint(endpoint: str) -> Tuple[str, Any]:
    """Split a listen endpoint into (transport, address)"""
    match = ENDPOINT_PATTERN.match(endpoint)
    if not match:
        raise ValueError(f"Invalid listen endpoint: {endpoint!r}")
    if match.group("path"):
        return "unix", match.group("path")
    if match.group("host"):
        return "tcp", (match.group("host"), int(match.group("port")))
    if match.group("device"):
        return "kernel", match.group("device")
    return "loopback", None


def is_all_zero(data: bytes) -> bool:
    """True when every byte is 0x00"""
    return not data or data.count(0) == len(data)


def differing_ranges(left: bytes, right: bytes) -> List[Tuple[int, int]]:
    """Half-open byte ranges where two equally long buffers differ"""
    if len(left) != len(right):
        raise ValueError("buffers must have the same length")
    if not left:
        return []
    a = np.frombuffer(left, dtype=np.uint8)
    b = np.frombuffer(right, dtype=np.uint8)
    diff = np.flatnonzero(a != b)
    if diff.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(diff) > 1)
    starts = np.concatenate(([diff[0]], diff[breaks + 1]))
    ends = np.concatenate((diff[breaks], [diff[-1]])) + 1
    return [(int(s), int(e)) for s, e in zip(starts, ends)]
