"""End-to-end harness: agent + server in one process on a manual clock, with
optional transport faults and a single armed crash point."""

import random
from dataclasses import dataclass, field

from wattline import faults
from wattline.agent import Agent, AgentConfig
from wattline.backend.http import Response
from wattline.faults import SimulatedCrash
from wattline.sim import load_scenario, make_provider
from wattline.timeutil import ManualClock
from wattline.uploader import ApiClient, InProcessTransport, NetworkError

from conftest import T0, make_app

ADMIN = ("admin@example.com", "admin-password")
AGENT = ("agent@example.com", "agent-password")

CRASH_POINTS = (
    "sampler.before_append",
    "seglog.append.before_write",
    "seglog.append.after_write",
    "store.append.after_flush",
    "store.next_batch.before_write",
    "store.next_batch.after_flush",
    "uploader.before_send",
    "server.ingest.before_commit",
    "server.ingest.after_commit",
    "uploader.after_send",
    "store.mark_acked.before_write",
    "store.mark_acked.after_flush",
    "seglog.rewrite.before_swap",
    "seglog.rewrite.mid_swap",
)


class RecordingSink:
    """Store wrapper that remembers which appends returned normally."""

    def __init__(self, store, appended: set):
        self.store = store
        self.appended = appended

    def append(self, record):
        self.store.append(record)
        self.appended.add(record.record_id)


class FaultyTransport:
    """Forwards to the app, but per request may drop it, drop the reply,
    deliver it twice, or answer 503, as drawn from ``rng``."""

    KINDS = ("ok", "drop_request", "drop_response", "duplicate", "unavailable")

    def __init__(self, app, rng: random.Random, p_fault: float = 0.3):
        self.inner = InProcessTransport(app)
        self.rng = rng
        self.p_fault = p_fault
        self.log: list[str] = []

    def request(self, method, path, **kw):
        kind = "ok" if self.rng.random() >= self.p_fault else self.rng.choice(self.KINDS[1:])
        self.log.append(kind)
        if kind == "drop_request":
            raise NetworkError("injected: request lost")
        if kind == "unavailable":
            return Response(503, b'{"error": "injected outage", "details": []}')
        resp = self.inner.request(method, path, **kw)
        if kind == "duplicate":
            resp = self.inner.request(method, path, **kw)
        if kind == "drop_response":
            raise NetworkError("injected: response lost")
        return resp


@dataclass
class PipelineResult:
    appended: set
    server_ids: set
    recovered: set = field(default_factory=set)
    crashed: bool = False
    restarts: int = 0
    agent: object = None
    app: object = None


def setup_server(data_dir, clock, send_interval_s=3, **config):
    app = make_app(data_dir, clock)
    client = ApiClient(InProcessTransport(app), clock=clock)
    client.register(*ADMIN)
    tok = client.login(*ADMIN)
    client.put_config({"send_interval_s": send_interval_s, **config}, tok)
    return app


def build_agent(store_dir, app, clock, provider, appended, transport=None, scenario="threeproc.json",
                **overrides):
    cfg = AgentConfig(store_dir=str(store_dir), scenario=scenario, email=AGENT[0], password=AGENT[1],
                      auto_register=True, batch_max=overrides.pop("batch_max", 5),
                      retain_s=overrides.pop("retain_s", 0.0), backoff_base_ms=100,
                      backoff_max_ms=2000, **overrides)
    agent = Agent(cfg, clock=clock, transport=transport or InProcessTransport(app), provider=provider,
                  fsync=False)
    agent.sampler.sink = RecordingSink(agent.store, appended)
    return agent


def run_pipeline(tmp, scenario="threeproc.json", ticks=12, crash_point=None, crash_after=1,
                 fault_seed=None, p_fault=0.3, retain_s=0.0) -> PipelineResult:
    """Sample ``ticks`` ticks and drain. If ``crash_point`` fires, both the
    agent and the server are torn down and restarted from their directories,
    then the run resumes (remaining ticks) and drains to quiescence."""
    clock = ManualClock(T0)
    server_dir, store_dir = tmp / "server", tmp / "agent"
    app = setup_server(server_dir, clock)
    provider = make_provider(load_scenario(scenario), clock)
    appended: set = set()
    res = PipelineResult(appended, set())

    def transport_for(a):
        if fault_seed is None:
            return None
        return FaultyTransport(a, random.Random(fault_seed), p_fault)

    agent = build_agent(store_dir, app, clock, provider, appended, transport_for(app), scenario,
                        retain_s=retain_s)
    if crash_point:
        faults.arm(crash_point, after=crash_after)
    start = clock.now()
    try:
        agent.run_simulated(ticks)
    except SimulatedCrash:
        res.crashed = True
    finally:
        faults.disarm_all()
    if res.crashed:
        # process death: nothing in memory survives, only the directories
        agent.close()
        app.close()
        res.restarts += 1
        app = make_app(server_dir, clock)
        agent = build_agent(store_dir, app, clock, provider, appended, transport_for(app), scenario,
                            retain_s=retain_s)
        res.recovered = {e.record.record_id for e in agent.store.entries()}
        done = int((clock.now() - start).total_seconds()) + 1
        clock.advance(1)
        agent.run_simulated(max(ticks - done, 0))
    owner = app.store.account_by_email(AGENT[0])
    res.server_ids = {r.record_id for r in app.store.query(owner.user_id)} if owner else set()
    res.agent, res.app = agent, app
    return res


def close(res: PipelineResult) -> None:
    res.agent.close()
    res.app.close()
