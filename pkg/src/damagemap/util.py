"""Small shared helpers: atomic file writes, checksums, canonical JSON."""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from pathlib import Path


def crc32(data: bytes) -> int:
    """CRC32 of a byte string, as an unsigned 32-bit int."""
    return zlib.crc32(data) & 0xFFFFFFFF


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write bytes to path via a temp file + os.replace, so readers never
    observe a half-written artifact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, obj) -> None:
    """Serialize obj as stable, human-diffable JSON (sorted keys, trailing newline)."""
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    from .errors import DataError

    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON in {path}: {e}") from e
