"""On-disk formats: float64 sidecars, CSV tables and canonical JSON.

Sidecar layout (all little-endian)::

    magic     8 bytes   e.g. b"BNNCHN01"
    hdr_len   uint32    length of the UTF-8 JSON header
    header    hdr_len   JSON object (dims, layout, ...)
    body      float64[] row-major payload
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.10g"


class FormatError(ValueError):
    pass


def write_sidecar(path, magic: bytes, header: dict, arrays) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_sidecar(path, magic: bytes):
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r} at byte 0, expected {magic!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    (n,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + n:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    header = json.loads(raw[12 : 12 + n])
    body = raw[12 + n :]
    if len(body) % 8:
        raise FormatError(f"{path}: body length not a multiple of 8 at byte {12 + n}")
    return header, np.frombuffer(body, dtype="<f8").astype(np.float64)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path, rows: list, columns: list = None) -> None:
    """RFC-4180 CSV with a mandatory header row and ``%.10g`` floats."""
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # JSON has no inf/nan; keep the value readable and deterministic
        return v if np.isfinite(v) else str(v)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj), encoding="utf-8")
