"""UTC millisecond timestamps and injectable clocks."""

from __future__ import annotations

import threading
import time
from datetime import datetime, timedelta, timezone

UTC = timezone.utc


def utc_ms(dt: datetime) -> datetime:
    """Convert to an aware UTC datetime truncated to whole milliseconds."""
    if dt.tzinfo is None:
        raise ValueError("naive datetime; timestamps must be timezone-aware")
    dt = dt.astimezone(UTC)
    return dt.replace(microsecond=dt.microsecond - dt.microsecond % 1000)


def is_utc_ms(dt: datetime) -> bool:
    return (
        dt.tzinfo is not None
        and dt.utcoffset() == timedelta(0)
        and dt.microsecond % 1000 == 0
    )


def format_ts(dt: datetime) -> str:
    """ISO-8601 UTC with millisecond precision, e.g. ``2024-05-01T12:00:00.250Z``."""
    dt = utc_ms(dt)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{dt.microsecond // 1000:03d}Z"


def parse_ts(text: str) -> datetime:
    """Parse an ISO-8601 timestamp. A missing offset is rejected."""
    if not isinstance(text, str):
        raise ValueError(f"timestamp must be a string, got {type(text).__name__}")
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError:
        raise ValueError(f"malformed timestamp: {text!r}") from None
    if dt.tzinfo is None:
        raise ValueError(f"timestamp without UTC offset: {text!r}")
    return utc_ms(dt)


EPOCH = datetime(1970, 1, 1, tzinfo=UTC)


def to_epoch_ms(dt: datetime) -> int:
    return (utc_ms(dt) - EPOCH) // timedelta(milliseconds=1)


def from_epoch_ms(ms: int) -> datetime:
    return EPOCH + timedelta(milliseconds=ms)


class SystemClock:
    """Wall clock. ``sleep`` blocks the calling thread."""

    def now(self) -> datetime:
        return utc_ms(datetime.now(UTC))

    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class ManualClock:
    """Deterministic clock for tests and simulation; ``sleep`` advances time instantly."""

    def __init__(self, start: datetime | None = None):
        self._now = utc_ms(start or datetime(2024, 1, 1, tzinfo=UTC))
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def monotonic(self) -> float:
        return self.now().timestamp()

    def advance(self, seconds: float) -> datetime:
        with self._lock:
            self._now = utc_ms(self._now + timedelta(seconds=seconds))
            return self._now

    def set(self, when: datetime) -> None:
        with self._lock:
            self._now = utc_ms(when)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self.advance(seconds)
