"""Domain types shared by the agent and the server, plus the canonical line encoding.

A :class:`ProcessRecord` is one per-process, per-interval measurement. Its
canonical text form is a single-line JSON object whose keys match the CSV
export columns; optional fields that are absent are omitted from the object.
"""

from __future__ import annotations

import enum
import json
import math
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Iterable

from wattline.timeutil import format_ts, is_utc_ms, parse_ts


class Status(str, enum.Enum):
    FOCUS = "focus"
    IDLE = "idle"


class MetricField(str, enum.Enum):
    """Optional record columns that collection can be switched on or off for."""

    DESCRIPTION = "description"
    IP_ADDRESS = "ip_address"
    MAC_ADDRESS = "mac_address"
    CPU = "cpu"
    MEMORY = "memory"
    DISK = "disk"
    NETWORK = "network"
    IO = "io"
    ENERGY = "energy"


ALL_METRICS: frozenset[MetricField] = frozenset(MetricField)


def parse_metrics(names: Iterable[str]) -> frozenset[MetricField]:
    """Turn metric names into an enabled set; unknown names raise ``ValueError``."""
    out = set()
    for name in names:
        try:
            out.add(MetricField(name))
        except ValueError:
            raise ValueError(f"unknown metric field: {name!r}") from None
    return frozenset(out)


@dataclass(frozen=True)
class ProcessIdentity:
    """A process incarnation. Two identities with the same pid but different
    start times are different processes (pid reuse)."""

    pid: int
    start_time: datetime


# usage field name -> (MetricField, canonical key)
USAGE_FIELDS: dict[str, tuple[MetricField, str]] = {
    "cpu_fraction": (MetricField.CPU, "cpu_fraction"),
    "memory_bytes": (MetricField.MEMORY, "memory_bytes"),
    "disk_bytes_per_s": (MetricField.DISK, "disk_bytes_per_s"),
    "network_bytes_per_s": (MetricField.NETWORK, "network_bytes_per_s"),
    "io_ops_per_s": (MetricField.IO, "io_ops_per_s"),
}


@dataclass(frozen=True)
class ResourceUsage:
    """Resource usage over one interval. ``None`` marks a metric that was not collected."""

    cpu_fraction: float | None = 0.0
    memory_bytes: float | None = 0.0
    disk_bytes_per_s: float | None = 0.0
    network_bytes_per_s: float | None = 0.0
    io_ops_per_s: float | None = 0.0

    def __add__(self, other: ResourceUsage) -> ResourceUsage:
        if not isinstance(other, ResourceUsage):
            return NotImplemented
        return ResourceUsage(
            **{
                name: (getattr(self, name) or 0.0) + (getattr(other, name) or 0.0)
                for name in USAGE_FIELDS
            }
        )

    def violations(self) -> list[str]:
        out = []
        for name in USAGE_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                out.append(f"{name} is not a number")
            elif not math.isfinite(value):
                out.append(f"{name} is not finite")
            elif value < 0:
                out.append(f"{name} is negative")
        cpu = self.cpu_fraction
        if isinstance(cpu, (int, float)) and math.isfinite(cpu) and cpu > 1:
            out.append("cpu_fraction out of range")
        return out


def total_usage(usages: Iterable[ResourceUsage]) -> ResourceUsage:
    acc = ResourceUsage()
    for u in usages:
        acc = acc + u
    return acc


@dataclass(frozen=True)
class ProcessRecord:
    identity: ProcessIdentity
    process_name: str
    status: Status
    interval_start: datetime
    interval_end: datetime
    usage: ResourceUsage = field(default_factory=ResourceUsage)
    description: str | None = None
    energy_j: float | None = None
    ip_address: str | None = None
    mac_address: str | None = None
    record_id: uuid.UUID = field(default_factory=uuid.uuid4)

    def __post_init__(self):
        # an empty optional string carries no information; store it as absent so
        # JSON, log, and CSV forms all agree
        for name in ("description", "ip_address", "mac_address"):
            if getattr(self, name) == "":
                object.__setattr__(self, name, None)

    @property
    def duration_s(self) -> float:
        return (self.interval_end - self.interval_start).total_seconds()


def validate_record(record: ProcessRecord) -> list[str]:
    """Return every invariant violation of ``record``; an empty list means valid."""
    problems: list[str] = []
    if not isinstance(record.record_id, uuid.UUID):
        problems.append("record_id is not a UUID")
    pid = record.identity.pid
    if isinstance(pid, bool) or not isinstance(pid, int) or pid < 0:
        problems.append("process_id must be a non-negative integer")
    if not isinstance(record.process_name, str) or not record.process_name:
        problems.append("process_name must be a non-empty string")
    if not isinstance(record.status, Status):
        problems.append("status must be focus or idle")
    stamps = {
        "process_start_time": record.identity.start_time,
        "interval_start": record.interval_start,
        "interval_end": record.interval_end,
    }
    stamps_ok = True
    for name, ts in stamps.items():
        if not isinstance(ts, datetime) or not is_utc_ms(ts):
            problems.append(f"{name} must be a UTC timestamp with millisecond precision")
            stamps_ok = False
    if stamps_ok and record.interval_end <= record.interval_start:
        problems.append("empty interval")
    problems.extend(record.usage.violations())
    e = record.energy_j
    if e is not None:
        if isinstance(e, bool) or not isinstance(e, (int, float)) or not math.isfinite(e):
            problems.append("energy_j is not a finite number")
        elif e < 0:
            problems.append("energy_j is negative")
    for name in ("description", "ip_address", "mac_address"):
        value = getattr(record, name)
        if value is not None and not isinstance(value, str):
            problems.append(f"{name} must be a string")
    return problems


def project_record(record: ProcessRecord, enabled: Iterable[MetricField]) -> ProcessRecord:
    """Drop the optional fields whose metric is not enabled.

    Mandatory fields (identity, name, status, interval bounds) are never touched.
    """
    enabled = frozenset(enabled)
    usage_changes = {
        name: None for name, (metric, _) in USAGE_FIELDS.items() if metric not in enabled
    }
    changes: dict = {}
    if usage_changes:
        changes["usage"] = replace(record.usage, **usage_changes)
    if MetricField.DESCRIPTION not in enabled:
        changes["description"] = None
    if MetricField.IP_ADDRESS not in enabled:
        changes["ip_address"] = None
    if MetricField.MAC_ADDRESS not in enabled:
        changes["mac_address"] = None
    if MetricField.ENERGY not in enabled:
        changes["energy_j"] = None
    return replace(record, **changes) if changes else record


# ---------------------------------------------------------------------------
# canonical encoding

FIELD_ORDER: tuple[str, ...] = (
    "record_id",
    "process_name",
    "process_id",
    "process_start_time",
    "status",
    "interval_start",
    "interval_end",
    "ip_address",
    "mac_address",
    "description",
    "cpu_fraction",
    "memory_bytes",
    "disk_bytes_per_s",
    "network_bytes_per_s",
    "io_ops_per_s",
    "energy_j",
)
MANDATORY_KEYS = frozenset(
    {"record_id", "process_name", "process_id", "process_start_time", "status",
     "interval_start", "interval_end"}
)
_NUMERIC_KEYS = tuple(USAGE_FIELDS) + ("energy_j",)
_STRING_KEYS = ("ip_address", "mac_address", "description")


class RecordDecodeError(ValueError):
    """Malformed record text. ``offset`` is a byte offset into the input, when known."""

    def __init__(self, message: str, offset: int | None = None, field: str | None = None):
        self.offset = offset
        self.field = field
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class UnknownFieldError(RecordDecodeError):
    def __init__(self, fields: list[str]):
        self.fields = fields
        super().__init__(f"unknown field: {', '.join(fields)}")


def record_to_dict(record: ProcessRecord) -> dict:
    """Canonical key/value view; absent optional fields are left out."""
    d = {
        "record_id": str(record.record_id),
        "process_name": record.process_name,
        "process_id": record.identity.pid,
        "process_start_time": format_ts(record.identity.start_time),
        "status": record.status.value,
        "interval_start": format_ts(record.interval_start),
        "interval_end": format_ts(record.interval_end),
        "ip_address": record.ip_address,
        "mac_address": record.mac_address,
        "description": record.description,
    }
    for name in USAGE_FIELDS:
        d[name] = getattr(record.usage, name)
    d["energy_j"] = record.energy_j
    return {k: d[k] for k in FIELD_ORDER if d[k] is not None}


def encode_record(record: ProcessRecord) -> str:
    """One-line canonical JSON text (no trailing newline)."""
    return json.dumps(record_to_dict(record), ensure_ascii=False, allow_nan=False,
                      separators=(",", ":"))


def _num(obj: dict, key: str) -> float | None:
    if key not in obj:
        return None
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RecordDecodeError(f"field {key} must be a number", field=key)
    return float(v)


def record_from_dict(obj: dict) -> ProcessRecord:
    if not isinstance(obj, dict):
        raise RecordDecodeError("record must be a JSON object")
    unknown = sorted(set(obj) - set(FIELD_ORDER))
    if unknown:
        raise UnknownFieldError(unknown)
    missing = sorted(MANDATORY_KEYS - set(obj))
    if missing:
        raise RecordDecodeError(f"missing field: {', '.join(missing)}", field=missing[0])
    try:
        record_id = uuid.UUID(obj["record_id"])
    except (ValueError, TypeError, AttributeError):
        raise RecordDecodeError("field record_id is not a UUID", field="record_id") from None
    pid = obj["process_id"]
    if isinstance(pid, bool) or not isinstance(pid, int):
        raise RecordDecodeError("field process_id must be an integer", field="process_id")
    stamps = {}
    for key in ("process_start_time", "interval_start", "interval_end"):
        try:
            stamps[key] = parse_ts(obj[key])
        except ValueError as exc:
            raise RecordDecodeError(f"field {key}: {exc}", field=key) from None
    try:
        status = Status(obj["status"])
    except ValueError:
        raise RecordDecodeError("field status must be focus or idle", field="status") from None
    name = obj["process_name"]
    if not isinstance(name, str):
        raise RecordDecodeError("field process_name must be a string", field="process_name")
    strings = {}
    for key in _STRING_KEYS:
        value = obj.get(key)
        if value is not None and not isinstance(value, str):
            raise RecordDecodeError(f"field {key} must be a string", field=key)
        strings[key] = value
    usage = ResourceUsage(**{k: _num(obj, k) for k in USAGE_FIELDS})
    return ProcessRecord(
        record_id=record_id,
        identity=ProcessIdentity(pid=pid, start_time=stamps["process_start_time"]),
        process_name=name,
        status=status,
        interval_start=stamps["interval_start"],
        interval_end=stamps["interval_end"],
        usage=usage,
        energy_j=_num(obj, "energy_j"),
        **strings,
    )


def decode_record(text: str | bytes) -> ProcessRecord:
    """Inverse of :func:`encode_record`.

    Malformed JSON raises :class:`RecordDecodeError` carrying the byte offset of
    the failure; keys outside the schema raise :class:`UnknownFieldError`.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RecordDecodeError("invalid UTF-8", offset=exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise RecordDecodeError(f"parse error: {exc.msg}", offset=offset) from None
    return record_from_dict(obj)
