"""Deterministic scripted workloads.

A scenario scripts process lifecycles and per-counter waveforms on an integer
tick axis. :class:`ScenarioProvider` turns it into a snapshot provider whose
output depends only on (scenario, tick), so whole pipelines can be tested
without OS counters or a power meter. See ``docs/scenarios.md`` for the file
format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path
from typing import Iterable

from wattline.power import CalibrationSample, PowerModel, predict, write_trace, GIB, MIB
from wattline.records import ProcessIdentity, ResourceUsage
from wattline.sampler import DeviceInfo, ProcessSnapshot
from wattline.timeutil import UTC, utc_ms

DEFAULT_EPOCH = datetime(2024, 1, 1, tzinfo=UTC)
COUNTERS = ("cpu", "memory", "disk", "network", "io")


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# waveforms


@dataclass(frozen=True)
class Waveform:
    kind: str  # constant | square | ramp
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    period: int = 1
    slope: float = 0.0

    def at(self, age: int) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "square":
            return self.lo if (age % self.period) * 2 < self.period else self.hi
        return self.slope * age

    def integral(self, age: int) -> float:
        """Sum of ``at(k)`` for ``k`` in ``[0, age)``."""
        if age <= 0:
            return 0.0
        if self.kind == "constant":
            return self.value * age
        if self.kind == "ramp":
            return self.slope * age * (age - 1) / 2
        full, rem = divmod(age, self.period)
        per_period = sum(self.at(k) for k in range(self.period))
        return full * per_period + sum(self.at(k) for k in range(rem))

    @classmethod
    def parse(cls, obj, where: str) -> Waveform:
        if isinstance(obj, (int, float)) and not isinstance(obj, bool):
            obj = {"kind": "constant", "value": obj}
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ScenarioError(f"{where}: waveform must be a number or an object with 'kind'")
        kind = obj["kind"]
        params = {k: v for k, v in obj.items() if k != "kind"}
        allowed = {"constant": {"value"}, "square": {"lo", "hi", "period"}, "ramp": {"slope"}}
        if kind not in allowed:
            raise ScenarioError(f"{where}: unknown waveform kind {kind!r}")
        if set(params) != allowed[kind]:
            raise ScenarioError(f"{where}: {kind} waveform takes {sorted(allowed[kind])}")
        for k, v in params.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ScenarioError(f"{where}: waveform parameter {k} must be a number >= 0")
        if kind == "square" and (not isinstance(params["period"], int) or params["period"] < 1):
            raise ScenarioError(f"{where}: square period must be an integer >= 1")
        return cls(kind=kind, **params)


ZERO = Waveform("constant", 0.0)


# ---------------------------------------------------------------------------
# scenario model


@dataclass(frozen=True)
class ProcessScript:
    pid: int
    name: str
    description: str = ""
    spawn_tick: int = 0
    exit_tick: int | None = None  # exclusive; None = never exits
    focus_ticks: frozenset[int] | str = frozenset()  # or "always"
    waveforms: dict[str, Waveform] = field(default_factory=dict)

    def alive(self, t: int) -> bool:
        return self.spawn_tick <= t and (self.exit_tick is None or t < self.exit_tick)

    def focused(self, t: int) -> bool:
        if not self.alive(t):
            return False
        return self.focus_ticks == "always" or t in self.focus_ticks

    def wave(self, counter: str) -> Waveform:
        return self.waveforms.get(counter, ZERO)


@dataclass(frozen=True)
class Scenario:
    seed: int
    n_cores: int
    ip_address: str
    mac_address: str
    processes: tuple[ProcessScript, ...] = ()

    def focused_processes(self) -> list[ProcessScript]:
        return [p for p in self.processes if p.focus_ticks]


def _int(obj: dict, key: str, where: str, default=None, minimum: int | None = 0):
    if key not in obj:
        if default is not None:
            return default
        raise ScenarioError(f"{where}: missing '{key}'")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int) or (minimum is not None and v < minimum):
        raise ScenarioError(f"{where}: '{key}' must be an integer >= {minimum}")
    return v


def _focus(obj, where: str):
    if obj == "always":
        return "always"
    if not isinstance(obj, list):
        raise ScenarioError(f"{where}: focus_ticks must be a list or \"always\"")
    ticks = set()
    for item in obj:
        if isinstance(item, int) and not isinstance(item, bool) and item >= 0:
            ticks.add(item)
        elif (isinstance(item, list) and len(item) == 2
              and all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in item)):
            ticks.update(range(item[0], item[1]))
        else:
            raise ScenarioError(f"{where}: focus_ticks entries are ticks or [start, end) pairs")
    return frozenset(ticks)


def scenario_from_dict(obj) -> Scenario:
    if not isinstance(obj, dict):
        raise ScenarioError("scenario must be a JSON object")
    device = obj.get("device", {})
    if not isinstance(device, dict):
        raise ScenarioError("device must be an object")
    procs = []
    raw_procs = obj.get("processes", [])
    if not isinstance(raw_procs, list):
        raise ScenarioError("processes must be a list")
    for i, p in enumerate(raw_procs):
        where = f"processes[{i}]"
        if not isinstance(p, dict):
            raise ScenarioError(f"{where}: must be an object")
        spawn = _int(p, "spawn_tick", where, default=0)
        exit_tick = p.get("exit_tick")
        if exit_tick is not None:
            exit_tick = _int(p, "exit_tick", where)
            if exit_tick <= spawn:
                raise ScenarioError(f"{where}: exit_tick must be greater than spawn_tick")
        waves = p.get("waveforms", {})
        if not isinstance(waves, dict) or set(waves) - set(COUNTERS):
            raise ScenarioError(f"{where}: waveforms keys must be among {', '.join(COUNTERS)}")
        name = p.get("name")
        if not isinstance(name, str) or not name:
            raise ScenarioError(f"{where}: 'name' must be a non-empty string")
        procs.append(ProcessScript(
            pid=_int(p, "pid", where),
            name=name,
            description=str(p.get("description", "")),
            spawn_tick=spawn,
            exit_tick=exit_tick,
            focus_ticks=_focus(p.get("focus_ticks", []), where),
            waveforms={k: Waveform.parse(v, f"{where}.waveforms.{k}") for k, v in waves.items()},
        ))
    scenario = Scenario(
        seed=_int(obj, "seed", "scenario", default=0, minimum=None),
        n_cores=_int(obj, "n_cores", "scenario", default=1, minimum=1),
        ip_address=str(device.get("ip_address", "10.0.0.1")),
        mac_address=str(device.get("mac_address", "02:00:00:00:00:01")),
        processes=tuple(procs),
    )
    validate_scenario(scenario)
    return scenario


def validate_scenario(scenario: Scenario) -> None:
    always = [p for p in scenario.processes if p.focus_ticks == "always"]
    finite = [p for p in scenario.processes if p.focus_ticks and p.focus_ticks != "always"]
    for a in always:
        for b in scenario.processes:
            if b is not a and b.focus_ticks and _lifetimes_overlap(a, b, b.focus_ticks):
                raise ScenarioError(
                    f"processes {a.name} (pid {a.pid}) and {b.name} (pid {b.pid}) "
                    "are both focused at the same tick")
    claimed: dict[int, ProcessScript] = {}
    for p in finite:
        for t in sorted(p.focus_ticks):
            if not p.alive(t):
                continue
            if t in claimed:
                q = claimed[t]
                raise ScenarioError(
                    f"processes {q.name} (pid {q.pid}) and {p.name} (pid {p.pid}) "
                    f"are both focused at tick {t}")
            claimed[t] = p
    by_pid: dict[int, list[ProcessScript]] = {}
    for p in scenario.processes:
        by_pid.setdefault(p.pid, []).append(p)
    for pid, group in by_pid.items():
        group.sort(key=lambda p: p.spawn_tick)
        for a, b in zip(group, group[1:]):
            if a.exit_tick is None or a.exit_tick > b.spawn_tick:
                raise ScenarioError(f"pid {pid} is alive twice at tick {b.spawn_tick}")


def _lifetimes_overlap(a: ProcessScript, b: ProcessScript, b_focus) -> bool:
    if b_focus == "always":
        lo = max(a.spawn_tick, b.spawn_tick)
        his = [x for x in (a.exit_tick, b.exit_tick) if x is not None]
        return not his or lo < min(his)
    return any(a.alive(t) and b.alive(t) for t in b_focus)


def load_scenario(source: str | Path) -> Scenario:
    """Load and validate a scenario file.

    ``source`` is a path, or the name of a bundled fixture
    (``threeproc.json``, ``pidreuse.json``, ``churn.json``).
    """
    path = Path(source)
    if path.exists():
        text = path.read_text(encoding="utf-8")
    elif path.name == str(source) and resources.files("wattline.scenarios").joinpath(path.name).is_file():
        text = resources.files("wattline.scenarios").joinpath(path.name).read_text(encoding="utf-8")
    else:
        raise FileNotFoundError(f"scenario not found: {source}")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(obj)


def bundled_scenarios() -> list[str]:
    return sorted(p.name for p in resources.files("wattline.scenarios").iterdir()
                  if p.name.endswith(".json"))


# ---------------------------------------------------------------------------
# provider


class ScenarioProvider:
    """Snapshot provider backed by a scenario.

    The current tick is read from ``clock``: tick ``t`` is the instant
    ``epoch + t * tick_s``. Process start times are the instants of their
    spawn ticks, so a reused pid yields a distinct identity.
    """

    def __init__(self, scenario: Scenario, clock=None, epoch: datetime = DEFAULT_EPOCH,
                 tick_s: float = 1.0):
        if tick_s <= 0:
            raise ValueError("tick_s must be > 0")
        self.scenario = scenario
        self.clock = clock
        self.epoch = utc_ms(epoch)
        self.tick_s = tick_s

    def time_of(self, t: int) -> datetime:
        return utc_ms(self.epoch + timedelta(seconds=t * self.tick_s))

    def tick_at(self, when: datetime) -> int:
        return math.floor((when - self.epoch).total_seconds() / self.tick_s + 1e-9)

    def snapshots_at(self, t: int) -> list[ProcessSnapshot]:
        out = []
        for p in self.scenario.processes:
            if not p.alive(t):
                continue
            age = t - p.spawn_tick
            out.append(ProcessSnapshot(
                identity=ProcessIdentity(p.pid, self.time_of(p.spawn_tick)),
                name=p.name,
                description=p.description,
                cumulative_cpu_s=p.wave("cpu").integral(age) * self.tick_s,
                memory_bytes=float(p.wave("memory").at(age)),
                cumulative_disk_bytes=p.wave("disk").integral(age) * self.tick_s,
                cumulative_net_bytes=p.wave("network").integral(age) * self.tick_s,
                cumulative_io_ops=p.wave("io").integral(age) * self.tick_s,
                has_focus=p.focused(t),
            ))
        return out

    def poll(self) -> list[ProcessSnapshot]:
        if self.clock is None:
            raise RuntimeError("ScenarioProvider.poll needs a clock")
        return self.snapshots_at(self.tick_at(self.clock.now()))

    def device_info(self) -> DeviceInfo:
        s = self.scenario
        return DeviceInfo(ip_address=s.ip_address, mac_address=s.mac_address, n_cores=s.n_cores)


def make_provider(scenario: Scenario, clock=None, epoch: datetime = DEFAULT_EPOCH,
                  tick_s: float = 1.0) -> ScenarioProvider:
    return ScenarioProvider(scenario, clock=clock, epoch=epoch, tick_s=tick_s)


def expected_record_count(scenario: Scenario, n_ticks: int, failed: Iterable[int] = ()) -> int:
    """Records a sampler should emit when polling ticks ``0..n_ticks-1``.

    Counted from the script alone: for each pair of consecutive successful
    polls, one record per process alive at both, plus one end marker per
    process alive at the first but not the second.
    """
    failed = set(failed)
    polls = [t for t in range(n_ticks) if t not in failed]
    total = 0
    for a, b in zip(polls, polls[1:]):
        for p in scenario.processes:
            if p.alive(a):
                total += 1  # steady record if alive at b, end marker otherwise
    return total


# ---------------------------------------------------------------------------
# seeded noise


class PCG32:
    """PCG-XSH-RR 64/32 generator with Box-Muller Gaussian draws."""

    MULT = 6364136223846793005
    MASK64 = (1 << 64) - 1

    def __init__(self, seed: int, stream: int = 54):
        self.state = 0
        self.inc = ((stream << 1) | 1) & self.MASK64
        self.next_u32()
        self.state = (self.state + seed) & self.MASK64
        self.next_u32()
        self._spare: float | None = None

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * self.MULT + self.inc) & self.MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        a = self.next_u32() >> 5
        b = self.next_u32() >> 6
        return (a * 67108864.0 + b) / 9007199254740992.0

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def gauss(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return mu + sigma * z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * r * math.cos(2.0 * math.pi * u2)


# usage ranges for synthetic calibration points
CALIBRATION_RANGES = {
    "cpu_fraction": 1.0,
    "memory_bytes": 8 * GIB,
    "disk_bytes_per_s": 100 * MIB,
    "network_bytes_per_s": 20 * MIB,
    "io_ops_per_s": 5000.0,
}


def synth_calibration(scenario: Scenario, true_model: PowerModel, noise_sigma: float, n: int,
                      path: str | Path | None = None) -> list[CalibrationSample]:
    """Synthetic calibration samples: random machine-wide usage, power from
    ``true_model`` plus Gaussian noise, all seeded by ``scenario.seed``.

    Writes the calibration trace format to ``path`` when given.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = PCG32(scenario.seed)
    samples = []
    for i in range(n):
        usage = ResourceUsage(**{k: rng.uniform(0.0, hi) for k, hi in CALIBRATION_RANGES.items()})
        power = predict(true_model, usage)
        if noise_sigma:
            power += rng.gauss(0.0, noise_sigma)
        if not power > 0:
            raise ValueError(f"sample {i}: non-positive power {power}; raise beta0 or lower noise")
        samples.append(CalibrationSample(usage, power))
    if path is not None:
        write_trace(samples, path)
    return samples
