"""Registry persistence: append-only change log plus periodic snapshots.

The snapshot is one checksummed record holding the full registry state,
written atomically (temp file + rename). The change log accumulates every
mutation since that snapshot. Restart loads the snapshot and replays the
log; a torn final log line from a crash is truncated, a failed checksum on
a complete line refuses to load.
"""

from __future__ import annotations

import os
from typing import List, Optional, Tuple

from .model import SessionError
from .records import (
    CorruptRecord,
    encode_record,
    read_record_file,
)
from .registry import Registry

SNAPSHOT_FILE = "registry.snapshot"
LOG_FILE = "registry.log"


class CorruptState(SessionError):
    code = "CorruptState"


class RegistryStore:
    def __init__(self, data_dir: str, snapshot_every: int = 256):
        self.data_dir = data_dir
        self.snapshot_every = max(1, snapshot_every)
        os.makedirs(data_dir, exist_ok=True)
        self.snapshot_path = os.path.join(data_dir, SNAPSHOT_FILE)
        self.log_path = os.path.join(data_dir, LOG_FILE)
        self._log = open(self.log_path, "ab")
        self._since_snapshot = 0

    # ---------------------------------------------------------- loading

    def load(self) -> Tuple[Optional[dict], List[dict]]:
        snap = None
        if os.path.exists(self.snapshot_path):
            try:
                recs, clean = read_record_file(self.snapshot_path)
            except CorruptRecord as e:
                raise CorruptState("snapshot unreadable: %s" % e)
            if not clean or len(recs) != 1:
                raise CorruptState("snapshot file damaged; restore from backup")
            snap = recs[0]
        try:
            changes, clean = read_record_file(self.log_path)
        except CorruptRecord as e:
            raise CorruptState("change log corrupt: %s" % e)
        if not clean:
            # torn tail from a crash mid-append: drop it
            from .records import truncate_to_clean

            self._log.close()
            truncate_to_clean(self.log_path)
            self._log = open(self.log_path, "ab")
        if snap is not None:
            base = int(snap.get("change_count", 0))
            changes = [c for c in changes if int(c.get("n", 0)) > base]
        return snap, changes

    def restore_into(self, registry: Registry) -> None:
        snap, changes = self.load()
        if snap is not None:
            registry.load_snapshot(snap)
        for change in changes:
            registry.apply_change(change)

    # ---------------------------------------------------------- writing

    def record(self, change: dict) -> None:
        self._log.write(encode_record(change))
        self._log.flush()
        os.fsync(self._log.fileno())
        self._since_snapshot += 1

    def maybe_snapshot(self, registry: Registry) -> bool:
        if self._since_snapshot < self.snapshot_every:
            return False
        self.write_snapshot(registry)
        return True

    def write_snapshot(self, registry: Registry) -> None:
        tmp = self.snapshot_path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(encode_record(registry.to_snapshot()))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.snapshot_path)
        # start a fresh log; records up to change_count live in the snapshot
        self._log.close()
        self._log = open(self.log_path, "wb")
        self._log.flush()
        self._since_snapshot = 0

    def close(self) -> None:
        self._log.close()
