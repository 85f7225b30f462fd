"""Checksummed line-delimited record files.

One record per line: eight lowercase hex digits of CRC-32 over the JSON
body, a single space, the body, a newline. JSON bodies are canonical
(sorted keys, compact separators, UTF-8, non-ASCII kept raw) so identical
records always serialize to identical bytes.

A file killed mid-write ends with a torn final line; readers truncate at
the last intact record. A checksum mismatch on a complete line is real
corruption and is reported, not skipped.
"""

from __future__ import annotations

import json
import os
import zlib
from typing import Any, Iterable, List, Optional, Tuple

from .model import SessionError


class CorruptRecord(SessionError):
    code = "CorruptLog"


class StorageFull(SessionError):
    code = "StorageFull"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode_record(obj: Any) -> bytes:
    body = canonical_json(obj).encode("utf-8")
    return b"%08x %s\n" % (zlib.crc32(body) & 0xFFFFFFFF, body)


def decode_record_line(line: bytes) -> Any:
    """Decode one complete line (without requiring the trailing newline)."""
    line = line.rstrip(b"\n")
    if len(line) < 9 or line[8:9] != b" ":
        raise CorruptRecord("malformed record line")
    try:
        want = int(line[:8], 16)
    except ValueError:
        raise CorruptRecord("bad checksum field")
    body = line[9:]
    if zlib.crc32(body) & 0xFFFFFFFF != want:
        raise CorruptRecord("checksum mismatch")
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptRecord("unparseable record body")


def read_record_file(path: str) -> Tuple[List[Any], bool]:
    """Read every intact record. Returns (records, clean).

    clean is False when the file ends in a torn line (no trailing newline),
    which readers treat as a crash artifact and ignore. A complete line that
    fails its checksum raises CorruptRecord.
    """
    records: List[Any] = []
    with open(path, "rb") as f:
        data = f.read()
    if not data:
        return records, True
    clean = data.endswith(b"\n")
    for line in data.split(b"\n")[:-1]:
        records.append(decode_record_line(line))
    return records, clean


def truncate_to_clean(path: str) -> int:
    """Drop a torn final line in place. Returns the resulting byte size."""
    with open(path, "rb") as f:
        data = f.read()
    if data and not data.endswith(b"\n"):
        keep = data.rfind(b"\n") + 1
        with open(path, "r+b") as f:
            f.truncate(keep)
        return keep
    return len(data)


class RecordWriter:
    """Append-only writer with a bounded buffer.

    Records are flushed to disk every `flush_every` appends or once
    `flush_interval_ms` has passed since the oldest unflushed record,
    whichever comes first. append() returns the byte offset of the record.
    """

    def __init__(
        self,
        path: str,
        flush_every: int = 1,
        flush_interval_ms: int = 0,
        max_bytes: Optional[int] = None,
    ):
        self.path = path
        self.flush_every = max(1, flush_every)
        self.flush_interval_ms = flush_interval_ms
        self.max_bytes = max_bytes
        self._f = open(path, "ab")
        self._offset = self._f.tell()
        self._pending = 0
        self._oldest_pending_ms: Optional[int] = None

    def append(self, obj: Any, now_ms: int = 0) -> int:
        data = encode_record(obj)
        if self.max_bytes is not None and self._offset + len(data) > self.max_bytes:
            raise StorageFull("log would exceed %d bytes" % self.max_bytes)
        at = self._offset
        self._f.write(data)
        self._offset += len(data)
        self._pending += 1
        if self._oldest_pending_ms is None:
            self._oldest_pending_ms = now_ms
        if self._pending >= self.flush_every or (
            self.flush_interval_ms
            and now_ms - self._oldest_pending_ms >= self.flush_interval_ms
        ):
            self.flush()
        return at

    def flush(self) -> None:
        self._f.flush()
        os.fsync(self._f.fileno())
        self._pending = 0
        self._oldest_pending_ms = None

    def close(self) -> None:
        self.flush()
        self._f.close()

    @property
    def size(self) -> int:
        return self._offset


class MemoryRecordLog:
    """Drop-in stand-in for RecordWriter used by the simulation harness.

    Keeps decoded records in memory while tracking the byte offsets the
    file-backed writer would have produced.
    """

    def __init__(self):
        self.records: List[Any] = []
        self._offset = 0

    def append(self, obj: Any, now_ms: int = 0) -> int:
        at = self._offset
        self._offset += len(encode_record(obj))
        self.records.append(obj)
        return at

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass

    @property
    def size(self) -> int:
        return self._offset
