"""The collection agent: a sampler and an uploader sharing one local store."""

from __future__ import annotations

import json
import logging
import os
import stat
import threading
from dataclasses import dataclass, field, fields
from datetime import datetime, timedelta
from pathlib import Path

from wattline.power import PowerModel
from wattline.records import ALL_METRICS, parse_metrics
from wattline.sampler import DEFAULT_INTERVAL_MS, MIN_INTERVAL_MS, ConfigurationError, NativeProvider, Sampler
from wattline.sim import DEFAULT_EPOCH, load_scenario, make_provider
from wattline.store import LocalStore
from wattline.timeutil import SystemClock
from wattline.uploader import ApiClient, HttpTransport, Uploader, UploaderConfig, UploaderHalted

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    store_dir: str
    provider: str = "simulated"
    scenario: str | None = None
    power_model: str | None = None
    sample_interval_ms: int = DEFAULT_INTERVAL_MS
    enabled_metrics: list[str] = field(default_factory=lambda: sorted(m.value for m in ALL_METRICS))
    staleness_s: float | None = None  # default: 5 x send interval
    retain_s: float = 7 * 24 * 3600.0
    server_url: str = "http://127.0.0.1:8080"
    email: str = ""
    password: str = ""
    send_interval_s: int = 60
    batch_max: int = 500
    backoff_base_ms: int = 500
    backoff_max_ms: int = 60_000
    auto_register: bool = False
    ca_bundle: str | None = None

    def __post_init__(self):
        if self.provider not in ("simulated", "native"):
            raise ConfigurationError(f"provider must be 'simulated' or 'native', got {self.provider!r}")
        if self.provider == "simulated" and not self.scenario:
            raise ConfigurationError("provider 'simulated' needs a 'scenario' path")
        if self.sample_interval_ms < MIN_INTERVAL_MS:
            raise ConfigurationError(f"sample_interval_ms must be >= {MIN_INTERVAL_MS}")
        parse_metrics(self.enabled_metrics)

    def uploader_config(self) -> UploaderConfig:
        names = {f.name for f in fields(UploaderConfig)}
        return UploaderConfig(**{k: v for k, v in vars(self).items() if k in names})

    def check_paths(self) -> None:
        for key in ("power_model", "ca_bundle"):
            value = getattr(self, key)
            if value and not Path(value).exists():
                raise ConfigurationError(f"{key} file does not exist: {value}")

    @classmethod
    def load(cls, path: str | Path) -> AgentConfig:
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(obj) - known)
        if extra:
            raise ConfigurationError(f"{path}: unknown key(s): {', '.join(extra)}")
        if obj.get("password") and os.name == "posix":
            mode = path.stat().st_mode
            if mode & (stat.S_IRGRP | stat.S_IROTH):
                log.warning("%s contains a password and is readable by other users", path)
        base = path.parent
        for key in ("store_dir", "scenario", "power_model", "ca_bundle"):
            if obj.get(key) and not Path(obj[key]).is_absolute() and (base / obj[key]).exists():
                obj[key] = str(base / obj[key])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None


class Agent:
    def __init__(self, config: AgentConfig, clock=None, transport=None, provider=None,
                 fsync: bool = True):
        config.check_paths()
        self.config = config
        self.clock = clock or SystemClock()
        up_cfg = config.uploader_config()
        staleness = config.staleness_s or 5.0 * up_cfg.send_interval_s
        self.store = LocalStore(config.store_dir, clock=self.clock, staleness_s=staleness,
                                fsync=fsync)
        if provider is None:
            if config.provider == "native":
                provider = NativeProvider()
            else:
                provider = make_provider(load_scenario(config.scenario), clock=self.clock,
                                         epoch=self.clock.now(),
                                         tick_s=config.sample_interval_ms / 1000.0)
        self.provider = provider
        model = PowerModel.load(config.power_model) if config.power_model else None
        self.sampler = Sampler(provider, self.store, interval_ms=config.sample_interval_ms,
                               model=model, enabled=parse_metrics(config.enabled_metrics))
        client = ApiClient(transport or HttpTransport(up_cfg.server_url, ca_bundle=up_cfg.ca_bundle),
                           clock=self.clock)
        self.uploader = Uploader(self.store, client, up_cfg, clock=self.clock,
                                 mac_address=provider.device_info().mac_address,
                                 on_config=self.apply_server_config)
        self._stop = threading.Event()
        self._sim_next: tuple[datetime, datetime] | None = None  # (tick, upload) when resuming

    def apply_server_config(self, cfg: dict) -> None:
        try:
            enabled = parse_metrics(cfg.get("enabled_metrics", []))
        except ValueError as exc:
            log.warning("ignoring server metric list: %s", exc)
        else:
            self.sampler.enabled = enabled
        interval = cfg.get("sample_interval_ms")
        if isinstance(interval, int) and interval >= MIN_INTERVAL_MS:
            self.sampler.interval_ms = interval

    # -- wall-clock operation ----------------------------------------------------

    def _sampler_loop(self) -> None:
        next_at = self.clock.now()
        while not self._stop.is_set():
            self.sampler.step(next_at)
            next_at += timedelta(milliseconds=self.sampler.interval_ms)
            delay = (next_at - self.clock.now()).total_seconds()
            if delay < 0:
                next_at = self.clock.now()  # fell behind; do not burst
                delay = 0
            self._stop.wait(delay)

    def _uploader_loop(self) -> None:
        while not self._stop.is_set():
            try:
                delay = self.uploader.cycle()
            except UploaderHalted:
                log.critical("uploader halted; sampling continues into the local store")
                return
            except Exception:
                log.exception("unexpected uploader error")
                delay = self.uploader.backoff.next()
            self._housekeeping()
            self._stop.wait(delay)

    def _housekeeping(self) -> None:
        try:
            removed = self.store.purge_acked(self.config.retain_s)
        except OSError as exc:
            log.warning("compaction failed: %s", exc)
            return
        if removed:
            log.info("purged %d acknowledged record(s)", removed)

    def run(self) -> None:
        """Run sampler and uploader threads until :meth:`stop` is called."""
        threads = [threading.Thread(target=self._sampler_loop, name="sampler", daemon=True),
                   threading.Thread(target=self._uploader_loop, name="uploader", daemon=True)]
        for t in threads:
            t.start()
        try:
            while any(t.is_alive() for t in threads) and not self._stop.is_set():
                self._stop.wait(0.5)
        finally:
            self._stop.set()
            for t in threads:
                t.join(timeout=30)
            self.store.close()

    def stop(self) -> None:
        self._stop.set()

    # -- simulated time ---------------------------------------------------------

    def run_simulated(self, n_ticks: int, drain: bool = True, max_cycles: int = 10_000) -> None:
        """Interleave sampler ticks and upload cycles on a manual clock.

        Events are processed in time order (a sampler tick before an upload
        cycle at the same instant). After the last tick, upload cycles keep
        running until the store has nothing pending when ``drain`` is set.
        A later call resumes the same schedule.
        """
        clock = self.clock
        next_tick = next_upload = clock.now()
        if self._sim_next is not None:
            next_tick, next_upload = (max(t, clock.now()) for t in self._sim_next)
        ticks = cycles = 0
        while ticks < n_ticks or (drain and self._undelivered() and cycles < max_cycles):
            if ticks < n_ticks and next_tick <= next_upload:
                clock.set(next_tick)
                self.sampler.step(next_tick)
                ticks += 1
                next_tick += timedelta(milliseconds=self.sampler.interval_ms)
            else:
                clock.set(max(next_upload, clock.now()))
                delay = self.uploader.cycle()
                self._housekeeping()
                cycles += 1
                next_upload = clock.now() + timedelta(seconds=delay)
        self._sim_next = (next_tick, next_upload)

    def _undelivered(self) -> bool:
        c = self.store.counts()
        return bool(c["pending"] or c["in_flight"] or self.sampler.backlog
                    or self.uploader.reports)

    def close(self) -> None:
        self.store.close()


def simulated_provider(scenario_path: str, clock, tick_s: float = 1.0):
    return make_provider(load_scenario(scenario_path), clock=clock, epoch=DEFAULT_EPOCH,
                         tick_s=tick_s)
