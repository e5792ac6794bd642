"""Deterministic JSON with 17 significant digits and a binary eigenfunction dump."""
from __future__ import annotations

import hashlib
import json
import math
import struct

import numpy as np

EIGF_MAGIC = b"EIGF"
EIGF_VERSION = 1


def _fmt(x):
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return "%.17g" % x


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return [_plain(x) for x in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    return obj


def _encode(obj, indent, level):
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end = "" if indent is None else "\n" + " " * (indent * level)
    sep = "," if indent is None else ","
    if obj is None or isinstance(obj, bool) or isinstance(obj, str) or isinstance(obj, int):
        return json.dumps(obj)
    if isinstance(obj, float):
        return _fmt(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(k) + ": " + _encode(v, indent, level + 1) for k, v in obj.items()]
        return "{" + pad + (sep + pad).join(items) + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in obj):
            return "[" + ", ".join(_encode(x, None, 0) for x in obj) + "]"
        items = [_encode(v, indent, level + 1) for v in obj]
        return "[" + pad + (sep + pad).join(items) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent=2):
    """JSON text with every float written as ``%.17g`` (inf/nan as strings)."""
    return _encode(_plain(obj), indent, 0)


def loads(text):
    """Inverse of :func:`dumps`; the strings "inf", "-inf" and "nan" become floats."""
    def fix(x):
        if isinstance(x, str) and x in ("inf", "-inf", "nan"):
            return float(x)
        if isinstance(x, list):
            return [fix(y) for y in x]
        if isinstance(x, dict):
            return {k: fix(v) for k, v in x.items()}
        return x

    return fix(json.loads(text))


def config_hash(config):
    """SHA-256 of the canonical JSON form of a config dict."""
    text = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def write_eigenfunctions(path, U):
    """Row-major little-endian float64 with a 16-byte ``EIGF`` header."""
    U = np.ascontiguousarray(U, dtype="<f8")
    if U.ndim == 1:
        U = U[:, None]
    rows, cols = U.shape
    with open(path, "wb") as f:
        f.write(EIGF_MAGIC + struct.pack("<III", EIGF_VERSION, rows, cols))
        f.write(U.tobytes(order="C"))


def read_eigenfunctions(path):
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != EIGF_MAGIC:
            raise ValueError("not an EIGF file")
        version, rows, cols = struct.unpack("<III", head[4:])
        if version != EIGF_VERSION:
            raise ValueError(f"unsupported EIGF version {version}")
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError("truncated EIGF payload")
    return data.reshape(rows, cols).astype(float)
