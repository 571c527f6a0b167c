import itertools
import uuid
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wattline.power import PowerModel
from wattline.records import ProcessIdentity, ResourceUsage, Status
from wattline.sampler import (
    ConfigurationError,
    DeviceInfo,
    ProcessSnapshot,
    ProviderError,
    Sampler,
    SamplerState,
    diff_usage,
    tick,
)
from wattline.sim import (
    expected_record_count,
    load_scenario,
    make_provider,
    scenario_from_dict,
)
from wattline.store import DuplicateRecordError
from wattline.timeutil import ManualClock

from conftest import T0

IDENT = ProcessIdentity(7, T0)


def snap(cpu=0.0, mem=0.0, disk=0.0, net=0.0, io=0.0, focus=False, ident=IDENT, name="p"):
    return ProcessSnapshot(ident, name, "", cpu, mem, disk, net, io, focus)


class ListProvider:
    """Returns one pre-built poll result per call; an Exception entry is raised."""

    def __init__(self, polls, n_cores=1):
        self.polls = list(polls)
        self.n_cores = n_cores

    def poll(self):
        item = self.polls.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    def device_info(self):
        return DeviceInfo("10.1.1.1", "02:00:00:00:00:09", self.n_cores)


def at(s):
    return T0 + timedelta(seconds=s)


def test_diff_usage_example():
    u = diff_usage(snap(cpu=1.0), snap(cpu=1.5), dt=1.0, n_cores=2)
    assert u.cpu_fraction == 0.25


def test_diff_usage_zero_delta():
    s = snap(cpu=3.0, mem=1234.0, disk=10.0, net=20.0, io=5.0)
    u = diff_usage(s, s, 2.0, 4)
    assert u == ResourceUsage(0.0, 1234.0, 0.0, 0.0, 0.0)


def test_diff_usage_counter_reset_clamps_to_zero():
    u = diff_usage(snap(cpu=9, disk=500, net=500, io=50), snap(cpu=1, disk=10, net=10, io=1), 1.0, 1)
    assert (u.cpu_fraction, u.disk_bytes_per_s, u.network_bytes_per_s, u.io_ops_per_s) == (0, 0, 0, 0)


def test_diff_usage_rates_and_cpu_clamp():
    u = diff_usage(snap(cpu=0, disk=0, net=0, io=0), snap(cpu=10, disk=4096, net=2048, io=30), 2.0, 2)
    assert u.cpu_fraction == 1.0  # 10 s of cpu over 4 core-seconds clamps
    assert (u.disk_bytes_per_s, u.network_bytes_per_s, u.io_ops_per_s) == (2048.0, 1024.0, 15.0)


def test_diff_usage_identity_mismatch():
    with pytest.raises(ValueError, match="identity"):
        diff_usage(snap(), snap(ident=ProcessIdentity(7, at(1))), 1.0, 1)


def test_first_tick_only_primes_state():
    provider = ListProvider([[snap(cpu=1.0)]])
    state, recs = tick(SamplerState(), provider, at(0))
    assert recs == []
    assert set(state.previous) == {IDENT} and state.last_tick == at(0)


def test_steady_process_yields_one_record_per_interval():
    provider = ListProvider([[snap(cpu=1.0)], [snap(cpu=1.5, focus=True)]], n_cores=2)
    state, _ = tick(SamplerState(), provider, at(0))
    state, recs = tick(state, provider, at(1))
    assert len(recs) == 1
    r = recs[0]
    assert (r.interval_start, r.interval_end) == (at(0), at(1))
    assert r.usage.cpu_fraction == 0.25 and r.status is Status.FOCUS
    assert (r.ip_address, r.mac_address) == ("10.1.1.1", "02:00:00:00:00:09")


def test_vanished_process_emits_zero_usage_end_marker():
    provider = ListProvider([[snap(cpu=1.0, mem=99.0)], []])
    state, _ = tick(SamplerState(), provider, at(0))
    state, recs = tick(state, provider, at(1))
    assert len(recs) == 1
    assert recs[0].usage == ResourceUsage() and recs[0].interval_end == at(1)
    assert state.previous == {}


def test_short_lived_process_three_tick_scenario():
    # seen only at tick 1: nothing with usage, one end marker at tick 2
    sc = scenario_from_dict({"processes": [
        {"pid": 1, "name": "blip", "spawn_tick": 1, "exit_tick": 2, "waveforms": {"cpu": 0.5}}]})
    clock = ManualClock(T0)
    sink = []
    Sampler(make_provider(sc, clock), sink).run(clock, max_ticks=3)
    assert len(sink) == 1 == expected_record_count(sc, 3)
    assert sink[0].usage == ResourceUsage() and sink[0].interval_end == at(2)


def test_failed_poll_leaves_state_unchanged():
    provider = ListProvider([[snap(cpu=1.0)], OSError("boom"), [snap(cpu=3.0)]])
    state, _ = tick(SamplerState(), provider, at(0))
    with pytest.raises(ProviderError):
        tick(state, provider, at(1))
    assert state.last_tick == at(0)
    state, recs = tick(state, provider, at(2))
    assert recs[0].interval_start == at(0) and recs[0].usage.cpu_fraction == 1.0


def test_two_focused_snapshots_rejected():
    a = snap(focus=True)
    b = snap(focus=True, ident=ProcessIdentity(8, T0))
    with pytest.raises(ProviderError, match="focus"):
        tick(SamplerState(), ListProvider([[a, b]]), at(0))


def test_interval_below_minimum_is_configuration_error():
    with pytest.raises(ConfigurationError):
        Sampler(ListProvider([]), [], interval_ms=50)


def _run(name, ticks, provider_wrapper=None, **kw):
    sc = load_scenario(name)
    clock = ManualClock(T0)
    provider = make_provider(sc, clock)
    if provider_wrapper:
        provider = provider_wrapper(provider)
    sink = []
    sampler = Sampler(provider, sink, **kw)
    sampler.run(clock, max_ticks=ticks)
    return sc, sink, sampler


def test_sixty_ticks_three_processes():
    sc, sink, _ = _run("threeproc.json", 60)
    assert len(sink) == 3 * 59 == expected_record_count(sc, 60)


@pytest.mark.parametrize("name,ticks", [("threeproc.json", 20), ("pidreuse.json", 30), ("churn.json", 40)])
def test_record_count_matches_script(name, ticks):
    sc, sink, _ = _run(name, ticks)
    assert len(sink) == expected_record_count(sc, ticks)


def test_provider_failing_every_second_poll():
    class Flaky:
        def __init__(self, inner):
            self.inner, self.n = inner, 0

        def poll(self):
            self.n += 1
            if self.n % 2 == 0:
                raise OSError("counter source unavailable")
            return self.inner.poll()

        def device_info(self):
            return self.inner.device_info()

    sc, sink, sampler = _run("churn.json", 30, Flaky)
    failed = [t for t in range(30) if t % 2 == 1]
    assert sampler.failed_polls == 15
    assert len(sink) == expected_record_count(sc, 30, failed)
    # every interval spans two scenario ticks
    assert all(r.interval_end - r.interval_start == timedelta(seconds=2) for r in sink)


def test_pid_reuse_gives_distinct_identities():
    _, sink, _ = _run("pidreuse.json", 10)
    idents = {r.identity for r in sink}
    assert {i.pid for i in idents} == {5000}
    assert len(idents) == 2


def test_at_most_one_focus_record_per_tick():
    _, sink, _ = _run("churn.json", 40)
    by_tick = {}
    for r in sink:
        by_tick.setdefault(r.interval_end, []).append(r.status)
    assert all(statuses.count(Status.FOCUS) <= 1 for statuses in by_tick.values())
    assert any(Status.FOCUS in s for s in by_tick.values())


def test_deterministic_apart_from_record_ids():
    def strip(rs):
        return [(r.identity, r.process_name, r.status, r.interval_start, r.usage) for r in rs]

    assert strip(_run("churn.json", 25)[1]) == strip(_run("churn.json", 25)[1])


def test_deterministic_ids_with_seeded_factory():
    def factory():
        counter = itertools.count(1)
        return lambda: uuid.UUID(int=next(counter))

    a = _run("threeproc.json", 5, id_factory=factory())[1]
    b = _run("threeproc.json", 5, id_factory=factory())[1]
    assert a == b


def test_energy_stamped_when_model_given():
    model = PowerModel(beta0=2.0, beta_cpu=10.0, feature_mask=frozenset({"cpu"}))
    _, sink, _ = _run("threeproc.json", 3, model=model)
    for r in sink:
        dt = (r.interval_end - r.interval_start).total_seconds()
        assert r.energy_j == pytest.approx(dt * 10.0 * r.usage.cpu_fraction, rel=1e-12)


def test_sink_failure_retried_without_loss():
    class FlakySink(list):
        fail = 3

        def append(self, rec):
            if self.fail:
                self.fail -= 1
                raise OSError("disk full")
            super().append(rec)

    sc = load_scenario("threeproc.json")
    clock = ManualClock(T0)
    sink = FlakySink()
    sampler = Sampler(make_provider(sc, clock), sink)
    sampler.run(clock, max_ticks=10)
    sampler.step(clock.now() + timedelta(seconds=1))  # lets the backlog drain
    assert len(sink) == expected_record_count(sc, 11)
    assert len({r.record_id for r in sink}) == len(sink)
    assert not sampler.backlog


def test_duplicate_from_sink_counts_as_stored():
    class Sink(list):
        def append(self, rec):
            super().append(rec)
            raise DuplicateRecordError("already there")

    sink = Sink()
    sampler = Sampler(ListProvider([[snap()], [snap(cpu=1)]]), sink)
    sampler.step(at(0))
    sampler.step(at(1))
    assert len(sink) == 1 and not sampler.backlog


counter_seq = st.lists(
    st.tuples(*[st.floats(0, 1e9, allow_nan=False) for _ in range(5)], st.booleans()),
    min_size=2, max_size=12)


@settings(max_examples=300, deadline=None)
@given(counter_seq, st.integers(1, 64))
def test_no_negative_usage_ever(seq, n_cores):
    polls = [[snap(cpu=c, mem=m, disk=d, net=n, io=i, focus=f)] for c, m, d, n, i, f in seq]
    sink = []
    sampler = Sampler(ListProvider(polls, n_cores=n_cores), sink)
    for k in range(len(polls)):
        sampler.step(at(k))
    assert len(sink) == len(polls) - 1
    for r in sink:
        for name in ("cpu_fraction", "memory_bytes", "disk_bytes_per_s",
                     "network_bytes_per_s", "io_ops_per_s"):
            assert getattr(r.usage, name) >= 0
        assert r.usage.cpu_fraction <= 1
