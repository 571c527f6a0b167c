"""Server persistence: the segment log engine plus in-memory indexes rebuilt on startup.

Each log line is one JSON object tagged by ``"t"``: ``account``, ``ingest``
(a whole accepted batch, so a torn write drops the batch entirely),
``config`` (a full config snapshot) or ``error`` (one client error report).
"""

from __future__ import annotations

import bisect
import json
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from wattline.faults import crashpoint
from wattline.records import (
    ALL_METRICS,
    MetricField,
    ProcessRecord,
    parse_metrics,
    record_from_dict,
    record_to_dict,
)
from wattline.seglog import SEGMENT_BYTES, SegmentLog
from wattline.timeutil import format_ts, parse_ts


@dataclass(frozen=True)
class UserAccount:
    user_id: str
    email: str
    password_hash: str
    role: str  # "user" | "admin"
    created_at: datetime


@dataclass(frozen=True)
class ServerConfig:
    send_interval_s: int = 60
    sample_interval_ms: int = 1000
    enabled_metrics: frozenset[MetricField] = ALL_METRICS
    token_lifetime_s: int = 3600

    def to_json(self) -> dict:
        return {
            "send_interval_s": self.send_interval_s,
            "sample_interval_ms": self.sample_interval_ms,
            "enabled_metrics": sorted(m.value for m in self.enabled_metrics),
            "token_lifetime_s": self.token_lifetime_s,
        }

    @classmethod
    def from_json(cls, obj: dict) -> ServerConfig:
        return cls(
            send_interval_s=obj["send_interval_s"],
            sample_interval_ms=obj["sample_interval_ms"],
            enabled_metrics=parse_metrics(obj["enabled_metrics"]),
            token_lifetime_s=obj["token_lifetime_s"],
        )


CONFIG_MINIMUMS = {"send_interval_s": 1, "sample_interval_ms": 100, "token_lifetime_s": 60}


def merge_config(current: ServerConfig, changes: dict) -> tuple[ServerConfig | None, list[str]]:
    """Apply a partial update; returns ``(config, [])`` or ``(None, problems)``."""
    if not isinstance(changes, dict):
        return None, ["body must be a JSON object"]
    problems = []
    merged = current.to_json()
    for key, value in changes.items():
        if key in CONFIG_MINIMUMS:
            lo = CONFIG_MINIMUMS[key]
            if isinstance(value, bool) or not isinstance(value, int) or value < lo:
                problems.append(f"{key} must be an integer >= {lo}")
                continue
        elif key == "enabled_metrics":
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                problems.append("enabled_metrics must be a list of metric names")
                continue
            try:
                parse_metrics(value)
            except ValueError as exc:
                problems.append(str(exc))
                continue
        else:
            problems.append(f"unknown config key: {key}")
            continue
        merged[key] = value
    if problems:
        return None, problems
    return ServerConfig.from_json(merged), []


@dataclass(frozen=True)
class IngestedRecord:
    record: ProcessRecord
    owner: str
    received_at: datetime


@dataclass(frozen=True)
class StoredErrorReport:
    report_id: str
    owner: str
    received_at: datetime
    mac_address: str
    timestamp: datetime
    severity: str
    message: str
    context: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "report_id": self.report_id,
            "owner": self.owner,
            "received_at": format_ts(self.received_at),
            "mac_address": self.mac_address,
            "timestamp": format_ts(self.timestamp),
            "severity": self.severity,
            "message": self.message,
            "context": self.context,
        }


def _sort_key(rec: ProcessRecord) -> tuple:
    return (rec.interval_start, str(rec.record_id))


class ServerStore:
    """Durable server state. All mutations go through one lock; each is a
    single log append, so a crash leaves every mutation all-or-nothing."""

    def __init__(self, data_dir: str | Path, fsync: bool = True, segment_bytes: int = SEGMENT_BYTES):
        self._log = SegmentLog(Path(data_dir), segment_bytes=segment_bytes, fsync=fsync)
        self._lock = threading.RLock()
        self.accounts: dict[str, UserAccount] = {}
        self.by_email: dict[str, str] = {}
        self.records: dict[uuid.UUID, IngestedRecord] = {}
        self._by_user: dict[str, list[tuple]] = {}
        self.config = ServerConfig()
        self.errors: list[StoredErrorReport] = []
        for _path, _off, entry in self._log.open(json.loads):
            self._apply(entry)

    # -- fold -------------------------------------------------------------------

    def _apply(self, entry: dict) -> None:
        kind = entry.get("t")
        if kind == "account":
            acct = UserAccount(entry["user_id"], entry["email"], entry["password_hash"],
                               entry["role"], parse_ts(entry["created_at"]))
            self.accounts[acct.user_id] = acct
            self.by_email[acct.email] = acct.user_id
        elif kind == "ingest":
            owner, received = entry["owner"], parse_ts(entry["received_at"])
            for obj in entry["records"]:
                rec = record_from_dict(obj)
                if rec.record_id in self.records:
                    continue
                self.records[rec.record_id] = IngestedRecord(rec, owner, received)
                bisect.insort(self._by_user.setdefault(owner, []), (*_sort_key(rec), rec.record_id))
        elif kind == "config":
            self.config = ServerConfig.from_json(entry["config"])
        elif kind == "error":
            self.errors.append(StoredErrorReport(
                report_id=entry["report_id"], owner=entry["owner"],
                received_at=parse_ts(entry["received_at"]), mac_address=entry["mac_address"],
                timestamp=parse_ts(entry["timestamp"]), severity=entry["severity"],
                message=entry["message"], context=entry.get("context", {}),
            ))
        else:
            raise ValueError(f"unknown entry type {kind!r}")

    def _commit(self, entry: dict) -> None:
        self._log.append([json.dumps(entry, separators=(",", ":"), ensure_ascii=False)])
        self._apply(entry)

    # -- accounts ---------------------------------------------------------------

    def create_account(self, email: str, password_hash: str, now: datetime) -> UserAccount | None:
        """Create an account; ``None`` if the email is taken. First account is admin."""
        with self._lock:
            if email in self.by_email:
                return None
            user_id = str(uuid.uuid4())
            role = "admin" if not self.accounts else "user"
            self._commit({"t": "account", "user_id": user_id, "email": email,
                          "password_hash": password_hash, "role": role,
                          "created_at": format_ts(now)})
            return self.accounts[user_id]

    def account_by_email(self, email: str) -> UserAccount | None:
        with self._lock:
            uid = self.by_email.get(email)
            return self.accounts.get(uid) if uid else None

    # -- records ----------------------------------------------------------------

    def ingest(self, owner: str, records: list[ProcessRecord], batch_id: str | None,
               now: datetime) -> tuple[int, int]:
        """Store the records not seen before; returns ``(accepted, duplicates)``."""
        with self._lock:
            fresh, seen = [], set()
            for rec in records:
                if rec.record_id in self.records or rec.record_id in seen:
                    continue
                seen.add(rec.record_id)
                fresh.append(rec)
            if fresh:
                crashpoint("server.ingest.before_commit")
                self._commit({"t": "ingest", "batch_id": batch_id, "owner": owner,
                              "received_at": format_ts(now),
                              "records": [record_to_dict(r) for r in fresh]})
                crashpoint("server.ingest.after_commit")
            return len(fresh), len(records) - len(fresh)

    def query(self, owner: str, name_contains: str | None = None, status: str | None = None,
              start: datetime | None = None, end: datetime | None = None) -> list[ProcessRecord]:
        """Owner's records matching every given filter, by (interval_start, record_id)."""
        with self._lock:
            keys = list(self._by_user.get(owner, ()))
            recs = self.records
        needle = name_contains.casefold() if name_contains else None
        out = []
        for interval_start, _rid, record_id in keys:
            if start is not None and interval_start < start:
                continue
            if end is not None and interval_start > end:
                break
            rec = recs[record_id].record
            if needle is not None and needle not in rec.process_name.casefold():
                continue
            if status is not None and rec.status.value != status:
                continue
            out.append(rec)
        return out

    def owners(self) -> list[str]:
        with self._lock:
            return list(self._by_user)

    # -- config / errors --------------------------------------------------------

    def set_config(self, config: ServerConfig) -> None:
        with self._lock:
            self._commit({"t": "config", "config": config.to_json()})

    def add_error(self, owner: str, now: datetime, mac_address: str, timestamp: datetime,
                  severity: str, message: str, context: dict) -> StoredErrorReport:
        with self._lock:
            rid = str(uuid.uuid4())
            self._commit({"t": "error", "report_id": rid, "owner": owner,
                          "received_at": format_ts(now), "mac_address": mac_address,
                          "timestamp": format_ts(timestamp), "severity": severity,
                          "message": message, "context": context})
            return self.errors[-1]

    def list_errors(self) -> list[StoredErrorReport]:
        with self._lock:
            return list(reversed(self.errors))

    def close(self) -> None:
        with self._lock:
            self._log.close()
