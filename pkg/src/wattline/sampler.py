"""Turn raw per-process counter snapshots into per-interval :class:`ProcessRecord` rows."""

from __future__ import annotations

import logging
import socket
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable, Iterable, Protocol

from wattline.faults import crashpoint
from wattline.power import PowerModel, attribute
from wattline.records import (
    ALL_METRICS,
    MetricField,
    ProcessIdentity,
    ProcessRecord,
    ResourceUsage,
    Status,
    project_record,
)
from wattline.store import DuplicateRecordError

log = logging.getLogger(__name__)

DEFAULT_INTERVAL_MS = 1000
MIN_INTERVAL_MS = 100


class ProviderError(RuntimeError):
    """A snapshot provider could not produce a poll."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ProcessSnapshot:
    identity: ProcessIdentity
    name: str
    description: str = ""
    cumulative_cpu_s: float = 0.0
    memory_bytes: float = 0.0
    cumulative_disk_bytes: float = 0.0
    cumulative_net_bytes: float = 0.0
    cumulative_io_ops: float = 0.0
    has_focus: bool = False


@dataclass(frozen=True)
class DeviceInfo:
    ip_address: str
    mac_address: str
    n_cores: int = 1


class SnapshotProvider(Protocol):
    def poll(self) -> list[ProcessSnapshot]: ...

    def device_info(self) -> DeviceInfo: ...


@dataclass
class SamplerState:
    previous: dict[ProcessIdentity, ProcessSnapshot] = field(default_factory=dict)
    last_tick: datetime | None = None


def diff_usage(prev: ProcessSnapshot, curr: ProcessSnapshot, dt: float, n_cores: int) -> ResourceUsage:
    """Usage between two snapshots of the same process taken ``dt`` seconds apart.

    Counter decreases (resets) count as zero activity rather than negative.
    """
    if prev.identity != curr.identity:
        raise ValueError(f"identity mismatch: {prev.identity} vs {curr.identity}")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if n_cores < 1:
        raise ValueError("n_cores must be >= 1")

    def rate(a: float, b: float) -> float:
        return max(0.0, b - a) / dt

    cpu = max(0.0, curr.cumulative_cpu_s - prev.cumulative_cpu_s) / (dt * n_cores)
    return ResourceUsage(
        cpu_fraction=min(1.0, cpu),
        memory_bytes=float(curr.memory_bytes),
        disk_bytes_per_s=rate(prev.cumulative_disk_bytes, curr.cumulative_disk_bytes),
        network_bytes_per_s=rate(prev.cumulative_net_bytes, curr.cumulative_net_bytes),
        io_ops_per_s=rate(prev.cumulative_io_ops, curr.cumulative_io_ops),
    )


def tick(
    state: SamplerState,
    provider: SnapshotProvider,
    now: datetime,
    model: PowerModel | None = None,
    id_factory: Callable[[], uuid.UUID] = uuid.uuid4,
) -> tuple[SamplerState, list[ProcessRecord]]:
    """Poll once and emit records for the interval ``[state.last_tick, now]``.

    The first poll only primes state. Processes seen in both polls get one
    record each; processes that vanished get a zero-usage end marker. If the
    provider fails, :class:`ProviderError` propagates and ``state`` is left as is.
    """
    if state.last_tick is not None and not now > state.last_tick:
        raise ValueError("tick time must move forward")
    try:
        snaps = provider.poll()
        device = provider.device_info()
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"provider poll failed: {exc}") from exc

    current: dict[ProcessIdentity, ProcessSnapshot] = {}
    for s in snaps:
        if s.identity in current:
            raise ProviderError(f"provider returned {s.identity} twice")
        current[s.identity] = s
    if sum(1 for s in snaps if s.has_focus) > 1:
        raise ProviderError("more than one process reported focus")

    new_state = SamplerState(previous=current, last_tick=now)
    if state.last_tick is None:
        return new_state, []

    dt = (now - state.last_tick).total_seconds()
    rows: list[tuple[ProcessSnapshot, ResourceUsage, Status]] = []
    for ident, curr in current.items():
        prev = state.previous.get(ident)
        if prev is None:
            continue
        status = Status.FOCUS if curr.has_focus else Status.IDLE
        rows.append((curr, diff_usage(prev, curr, dt, device.n_cores), status))
    for ident, prev in state.previous.items():
        if ident not in current:
            rows.append((prev, ResourceUsage(), Status.IDLE))

    energies: list[float | None] = [None] * len(rows)
    if model is not None:
        attributed, _idle = attribute(model, [(s.identity, u) for s, u, _ in rows], dt)
        # energy_j is a non-negative quantity; negative fitted slopes are clamped here
        energies = [max(0.0, e) for _, e in attributed]

    records = [
        ProcessRecord(
            record_id=id_factory(),
            identity=snap.identity,
            process_name=snap.name,
            description=snap.description,
            status=status,
            interval_start=state.last_tick,
            interval_end=now,
            usage=usage,
            energy_j=energy,
            ip_address=device.ip_address,
            mac_address=device.mac_address,
        )
        for (snap, usage, status), energy in zip(rows, energies)
    ]
    return new_state, records


class Sampler:
    """Drives :func:`tick` on a fixed cadence and hands records to a sink.

    Records that the sink fails to accept are kept and offered again before
    the next tick's records, so a temporarily failing sink loses nothing.
    """

    def __init__(
        self,
        provider: SnapshotProvider,
        sink,
        interval_ms: int = DEFAULT_INTERVAL_MS,
        model: PowerModel | None = None,
        enabled: Iterable[MetricField] = ALL_METRICS,
        id_factory: Callable[[], uuid.UUID] = uuid.uuid4,
    ):
        if interval_ms < MIN_INTERVAL_MS:
            raise ConfigurationError(f"interval_ms must be >= {MIN_INTERVAL_MS}, got {interval_ms}")
        self.provider = provider
        self.sink = sink
        self.interval_ms = interval_ms
        self.model = model
        self.enabled = frozenset(enabled)
        self.id_factory = id_factory
        self.state = SamplerState()
        self.backlog: list[ProcessRecord] = []
        self.failed_polls = 0

    def _flush(self) -> bool:
        while self.backlog:
            rec = self.backlog[0]
            try:
                self.sink.append(rec)
            except DuplicateRecordError:
                pass  # an earlier attempt already persisted it
            except Exception as exc:
                log.warning("sink append failed, will retry %d record(s): %s",
                            len(self.backlog), exc)
                return False
            self.backlog.pop(0)
        return True

    def step(self, now: datetime) -> list[ProcessRecord]:
        """Run one tick at ``now``; returns the records emitted by this tick."""
        self._flush()
        try:
            self.state, records = tick(self.state, self.provider, now, self.model, self.id_factory)
        except ProviderError as exc:
            self.failed_polls += 1
            log.warning("poll failed at %s: %s", now, exc)
            return []
        records = [project_record(r, self.enabled) for r in records]
        crashpoint("sampler.before_append")
        self.backlog.extend(records)
        self._flush()
        return records

    def run(self, clock, stop: Callable[[], bool] | None = None, max_ticks: int | None = None) -> int:
        """Tick every ``interval_ms`` on ``clock`` until ``stop()`` or ``max_ticks``."""
        interval = self.interval_ms / 1000.0
        n = 0
        next_at = clock.now()
        while (max_ticks is None or n < max_ticks) and not (stop and stop()):
            self.step(next_at)
            n += 1
            next_at = next_at + timedelta(seconds=interval)
            delay = (next_at - clock.now()).total_seconds()
            if delay > 0:
                clock.sleep(delay)
        return n


def run_sampler(provider, interval_ms: int, sink, clock, max_ticks: int | None = None,
                stop: Callable[[], bool] | None = None, model: PowerModel | None = None) -> Sampler:
    sampler = Sampler(provider, sink, interval_ms=interval_ms, model=model)
    sampler.run(clock, stop=stop, max_ticks=max_ticks)
    return sampler


# ---------------------------------------------------------------------------
# native provider (best effort)


class NativeProvider:
    """Snapshots from the host OS via psutil. Focus detection is not available
    portably, so every process reports idle. psutil has no per-process network
    counters either, so network rates are always 0."""

    def __init__(self):
        try:
            import psutil
        except ImportError:
            raise ConfigurationError(
                "native provider needs the 'psutil' package, which is not installed; "
                "use provider 'simulated' instead") from None
        self._psutil = psutil

    def poll(self) -> list[ProcessSnapshot]:
        from wattline.timeutil import UTC, utc_ms

        ps = self._psutil
        out = []
        for p in ps.process_iter(["pid", "name", "create_time", "cpu_times", "memory_info",
                                  "io_counters", "exe"]):
            info = p.info
            try:
                start = utc_ms(datetime.fromtimestamp(info["create_time"], tz=UTC))
            except (TypeError, OSError, ValueError):
                continue
            cpu = info.get("cpu_times")
            mem = info.get("memory_info")
            io = info.get("io_counters")
            out.append(ProcessSnapshot(
                identity=ProcessIdentity(info["pid"], start),
                name=info.get("name") or f"pid{info['pid']}",
                description=info.get("exe") or "",
                cumulative_cpu_s=(cpu.user + cpu.system) if cpu else 0.0,
                memory_bytes=float(mem.rss) if mem else 0.0,
                cumulative_disk_bytes=float(io.read_bytes + io.write_bytes) if io else 0.0,
                cumulative_net_bytes=0.0,
                cumulative_io_ops=float(io.read_count + io.write_count) if io else 0.0,
            ))
        return out

    def device_info(self) -> DeviceInfo:
        ps = self._psutil
        ip, mac = "", ""
        for name, addrs in ps.net_if_addrs().items():
            if name == "lo":
                continue
            for a in addrs:
                if a.family == socket.AF_INET and not ip:
                    ip = a.address
                elif getattr(ps, "AF_LINK", None) == a.family and not mac:
                    mac = a.address
        return DeviceInfo(ip_address=ip or "127.0.0.1", mac_address=mac or "00:00:00:00:00:00",
                          n_cores=ps.cpu_count() or 1)
