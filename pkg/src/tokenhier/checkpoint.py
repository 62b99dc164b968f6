"""Single-file tensor container: one JSON header line, then raw blobs.

Layout: ``{"format_version": 1, "kind": ..., "config": {...},
"tensors": [{"name", "shape"}...], "extra": {...}}\n`` followed by each
tensor's float64 little-endian bytes in the header's declared order.
Tensor names are written sorted so identical params yield identical
bytes on every platform.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import DataError, ParameterError

FORMAT_VERSION = 1


def config_fingerprint(obj) -> str:
    """Stable 16-hex-digit hash of a JSON-serializable config."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("ascii")).hexdigest()[:16]


def save_params(path, kind: str, config: dict, params: dict, extra: dict = None) -> None:
    names = sorted(params)
    for name in names:
        arr = np.asarray(params[name])
        if not np.all(np.isfinite(arr)):
            raise ParameterError(f"tensor {name!r} has non-finite entries")
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": [{"name": n, "shape": list(np.asarray(params[n]).shape)}
                    for n in names],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_params(path):
    """Returns (kind, config, params, extra); shape/size mismatches are
    data errors, not crashes."""
    with open(path, "rb") as fh:
        head_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(head_line)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: bad checkpoint header: {e}") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format")
    params = {}
    off = 0
    for entry in header.get("tensors", []):
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        count = 1
        for s in shape:
            count *= s
        nbytes = 8 * count
        chunk = blob[off:off + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: tensor {name!r} truncated")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes after tensors")
    return header["kind"], header.get("config", {}), params, header.get("extra", {})
