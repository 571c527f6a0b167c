"""Crash-safe local record queue.

The store is a fold over an append-only :class:`~wattline.seglog.SegmentLog`
holding three kinds of line:

* a canonical record line (JSON object) appends a ``pending`` record;
* ``BATCH <uuid> <uuid>[,<uuid>]*`` moves the listed records to ``in_flight``;
* ``ACK <uuid>`` moves every record of that batch to ``acked``.

Records only move forward (pending -> in_flight -> acked). An in-flight batch
that is never acknowledged is re-issued under a new batch id once it is
older than the staleness timeout. Batches found in flight when the store is
reopened belong to a consumer that no longer exists, so they are eligible
for re-issue immediately.
"""

from __future__ import annotations

import enum
import logging
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator

from wattline.faults import crashpoint
from wattline.records import ProcessRecord, decode_record, encode_record, validate_record
from wattline.seglog import SEGMENT_BYTES, CorruptSegmentError, SegmentLog
from wattline.timeutil import SystemClock

log = logging.getLogger(__name__)

DEFAULT_STALENESS_S = 5 * 60.0

__all__ = [
    "BatchManifest",
    "CorruptSegmentError",
    "DuplicateRecordError",
    "EntryState",
    "LocalStore",
    "StoredEntry",
    "UnknownBatchError",
]


class EntryState(str, enum.Enum):
    PENDING = "pending"
    IN_FLIGHT = "in_flight"
    ACKED = "acked"


class DuplicateRecordError(ValueError):
    pass


class UnknownBatchError(KeyError):
    pass


class InvalidRecordError(ValueError):
    pass


@dataclass
class StoredEntry:
    record: ProcessRecord
    state: EntryState = EntryState.PENDING
    batch_id: uuid.UUID | None = None


@dataclass(frozen=True)
class BatchManifest:
    batch_id: uuid.UUID
    record_ids: tuple[uuid.UUID, ...]
    created_at: datetime | None  # None: recovered from disk, age unknown


@dataclass(frozen=True)
class Batch:
    manifest: BatchManifest
    records: tuple[ProcessRecord, ...]

    @property
    def batch_id(self) -> uuid.UUID:
        return self.manifest.batch_id

    def __len__(self) -> int:
        return len(self.records)


def format_batch_line(batch_id: uuid.UUID, record_ids) -> str:
    return f"BATCH {batch_id} {','.join(str(r) for r in record_ids)}"


def _parse_line(line: str):
    if line.startswith("{"):
        return ("record", decode_record(line))
    parts = line.split(" ")
    if parts[0] == "BATCH" and len(parts) == 3:
        ids = tuple(uuid.UUID(x) for x in parts[2].split(","))
        if not ids or len(set(ids)) != len(ids):
            raise ValueError("BATCH line with empty or repeated record ids")
        return ("batch", uuid.UUID(parts[1]), ids)
    if parts[0] == "ACK" and len(parts) == 2:
        return ("ack", uuid.UUID(parts[1]))
    raise ValueError(f"unrecognized line: {line[:40]!r}")


class LocalStore:
    """Durable queue of :class:`ProcessRecord` with batch/ack tracking.

    One appender and one batch consumer may use the store concurrently; every
    operation is serialized by an internal lock and is durable before it
    returns.
    """

    def __init__(
        self,
        directory: str | Path,
        clock=None,
        staleness_s: float = DEFAULT_STALENESS_S,
        segment_bytes: int = SEGMENT_BYTES,
        fsync: bool = True,
    ):
        self.directory = Path(directory)
        self.clock = clock or SystemClock()
        self.staleness = timedelta(seconds=staleness_s)
        self._log = SegmentLog(self.directory, segment_bytes=segment_bytes, fsync=fsync)
        self._lock = threading.RLock()
        self._entries: dict[uuid.UUID, StoredEntry] = {}
        self._batches: dict[uuid.UUID, BatchManifest] = {}
        self._acked_batches: set[uuid.UUID] = set()
        self._recover()

    # -- recovery -------------------------------------------------------------

    @classmethod
    def recover(cls, directory: str | Path, **kwargs) -> LocalStore:
        """Reopen a store directory, restoring the last durable state."""
        return cls(directory, **kwargs)

    def _recover(self) -> None:
        for path, offset, item in self._log.open(_parse_line):
            try:
                self._apply(item, created_at=None)
            except (KeyError, ValueError) as exc:
                raise CorruptSegmentError(path, offset, f"inconsistent entry: {exc}") from None

    def _apply(self, item, created_at: datetime | None) -> None:
        kind = item[0]
        if kind == "record":
            rec = item[1]
            if rec.record_id in self._entries:
                raise ValueError(f"record {rec.record_id} appended twice")
            self._entries[rec.record_id] = StoredEntry(rec)
        elif kind == "batch":
            _, batch_id, ids = item
            if batch_id in self._batches:
                raise ValueError(f"batch {batch_id} issued twice")
            for rid in ids:
                entry = self._entries[rid]
                if entry.state is not EntryState.ACKED:
                    entry.state = EntryState.IN_FLIGHT
                    entry.batch_id = batch_id
            self._batches[batch_id] = BatchManifest(batch_id, ids, created_at)
        elif kind == "ack":
            batch_id = item[1]
            manifest = self._batches[batch_id]
            for rid in manifest.record_ids:
                entry = self._entries.get(rid)
                if entry is not None and entry.state is not EntryState.ACKED:
                    entry.state = EntryState.ACKED
                    entry.batch_id = batch_id
            self._acked_batches.add(batch_id)

    # -- operations ------------------------------------------------------------

    def append(self, record: ProcessRecord) -> None:
        problems = validate_record(record)
        if problems:
            raise InvalidRecordError("; ".join(problems))
        with self._lock:
            if record.record_id in self._entries:
                raise DuplicateRecordError(f"duplicate record_id {record.record_id}")
            self._log.append([encode_record(record)])
            self._entries[record.record_id] = StoredEntry(record)
            crashpoint("store.append.after_flush")

    def _is_stale(self, entry: StoredEntry, now: datetime) -> bool:
        created = self._batches[entry.batch_id].created_at
        return created is None or now - created >= self.staleness

    def next_batch(self, max_n: int) -> Batch | None:
        """Claim up to ``max_n`` of the oldest deliverable records under a fresh batch id."""
        if max_n < 1:
            raise ValueError("max_n must be >= 1")
        with self._lock:
            now = self.clock.now()
            chosen = []
            for rid, entry in self._entries.items():
                if entry.state is EntryState.PENDING or (
                    entry.state is EntryState.IN_FLIGHT and self._is_stale(entry, now)
                ):
                    chosen.append(rid)
                    if len(chosen) == max_n:
                        break
            if not chosen:
                return None
            batch_id = uuid.uuid4()
            ids = tuple(chosen)
            crashpoint("store.next_batch.before_write")
            self._log.append([format_batch_line(batch_id, ids)])
            self._apply(("batch", batch_id, ids), created_at=now)
            crashpoint("store.next_batch.after_flush")
            return Batch(self._batches[batch_id],
                         tuple(self._entries[r].record for r in ids))

    def mark_acked(self, batch_id: uuid.UUID) -> None:
        """Acknowledge a batch. Acknowledging twice is a no-op."""
        with self._lock:
            if batch_id not in self._batches:
                raise UnknownBatchError(f"unknown batch {batch_id}")
            if batch_id in self._acked_batches:
                return
            crashpoint("store.mark_acked.before_write")
            self._log.append([f"ACK {batch_id}"])
            self._apply(("ack", batch_id), created_at=None)
            crashpoint("store.mark_acked.after_flush")

    def purge_acked(self, retain_s: float) -> int:
        """Compact away acked records whose interval ended more than ``retain_s`` ago."""
        with self._lock:
            cutoff = self.clock.now() - timedelta(seconds=retain_s)
            doomed = {
                rid for rid, e in self._entries.items()
                if e.state is EntryState.ACKED and e.record.interval_end <= cutoff
            }
            if not doomed:
                return 0
            kept_lines = []
            dropped_batches = set()
            for line in self._log.read_lines():
                item = _parse_line(line)
                if item[0] == "record":
                    if item[1].record_id not in doomed:
                        kept_lines.append(line)
                elif item[0] == "batch":
                    ids = [r for r in item[2] if r not in doomed]
                    if ids:
                        kept_lines.append(format_batch_line(item[1], ids))
                    else:
                        dropped_batches.add(item[1])
                elif item[1] not in dropped_batches:
                    kept_lines.append(line)
            self._log.rewrite(kept_lines)
            for rid in doomed:
                del self._entries[rid]
            for bid in list(self._batches):
                m = self._batches[bid]
                if bid in dropped_batches:
                    del self._batches[bid]
                    self._acked_batches.discard(bid)
                else:
                    ids = tuple(r for r in m.record_ids if r not in doomed)
                    self._batches[bid] = BatchManifest(bid, ids, m.created_at)
            return len(doomed)

    # -- inspection ------------------------------------------------------------

    def counts(self) -> dict[str, int]:
        with self._lock:
            out = {s.value: 0 for s in EntryState}
            for e in self._entries.values():
                out[e.state.value] += 1
            return out

    def entries(self) -> list[StoredEntry]:
        with self._lock:
            return [StoredEntry(e.record, e.state, e.batch_id) for e in self._entries.values()]

    def records(self) -> Iterator[ProcessRecord]:
        return (e.record for e in self.entries())

    def batch(self, batch_id: uuid.UUID) -> BatchManifest:
        with self._lock:
            return self._batches[batch_id]

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def __contains__(self, record_id: uuid.UUID) -> bool:
        with self._lock:
            return record_id in self._entries

    def close(self) -> None:
        with self._lock:
            self._log.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
