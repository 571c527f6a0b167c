import random
import uuid
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wattline.backend.http import Response
from wattline.records import decode_record
from wattline.store import Batch, BatchManifest, LocalStore
from wattline.uploader import (
    AccountExistsError,
    ApiClient,
    AuthenticationError,
    Backoff,
    ErrorReport,
    InProcessTransport,
    NetworkError,
    PermanentError,
    TransientError,
    Uploader,
    UploaderConfig,
    UploaderHalted,
    parse_semver,
)

from conftest import T0, make_app, make_record
from pipeline import CRASH_POINTS, close, run_pipeline, setup_server

EMAIL, PASSWORD = "dev@example.com", "device-password"


class Switch:
    """Transport that can be taken down: while ``down`` every request fails."""

    def __init__(self, app):
        self.inner = InProcessTransport(app)
        self.down = False
        self.calls: list[str] = []

    def request(self, method, path, **kw):
        self.calls.append(f"{method} {path}")
        if self.down:
            raise NetworkError("connection refused")
        return self.inner.request(method, path, **kw)


def make_uploader(tmp_path, app, clock, transport=None, **cfg):
    store = LocalStore(tmp_path / "agent", clock=clock, staleness_s=300, fsync=False)
    client = ApiClient(transport or InProcessTransport(app), clock=clock)
    config = UploaderConfig(email=EMAIL, password=PASSWORD, auto_register=cfg.pop("auto_register", True),
                            **cfg)
    return Uploader(store, client, config, clock=clock, rng=random.Random(0), mac_address="aa:bb")


def batch_of(recs):
    return Batch(BatchManifest(uuid.uuid4(), tuple(r.record_id for r in recs), T0), tuple(recs))


# -- client error taxonomy -------------------------------------------------------------


def test_register_login_and_failures(client, clock):
    client.register(EMAIL, PASSWORD)
    tok = client.login(EMAIL, PASSWORD)
    assert tok.expires_at > clock.now() and tok.token
    with pytest.raises(AccountExistsError):
        client.register(EMAIL, PASSWORD)
    with pytest.raises(AuthenticationError):
        client.login(EMAIL, "wrong-password")
    with pytest.raises(PermanentError) as info:
        client.register("x@example.com", "short")
    assert info.value.status == 422


def test_unreachable_server_is_transient(clock):
    from wattline.uploader import HttpTransport

    client = ApiClient(HttpTransport("http://127.0.0.1:9", timeout=2), clock=clock)
    with pytest.raises(TransientError):
        client.login(EMAIL, PASSWORD)


def test_send_batch_and_duplicate(client, clock):
    client.register(EMAIL, PASSWORD)
    tok = client.login(EMAIL, PASSWORD)
    b = batch_of([make_record(i) for i in range(10)])
    assert (client.send_batch(b, tok).accepted, client.send_batch(b, tok).duplicates) == (10, 10)


def test_expired_token_never_attached(client, clock):
    client.register(EMAIL, PASSWORD)
    tok = client.login(EMAIL, PASSWORD)
    clock.advance(3600)
    with pytest.raises(AuthenticationError, match="expired"):
        client.send_batch(batch_of([make_record()]), tok)


def test_error_report_validation():
    with pytest.raises(ValueError):
        ErrorReport("aa", T0, "warn", "")
    with pytest.raises(ValueError):
        ErrorReport("aa", T0, "panic", "msg")


@pytest.mark.parametrize("current,latest,expected", [
    ("1.0.0", "1.1.0", True), ("1.1.0", "1.1.0", False), ("2.0.0", "1.1.0", False),
    ("1.1.0-rc.1", "1.1.0", True),
])
def test_check_update(tmp_path, clock, current, latest, expected):
    app = make_app(tmp_path / "s", clock, latest_version=latest)
    info = ApiClient(InProcessTransport(app), clock=clock).check_update(current)
    assert info.update_available is expected and info.latest_version == latest
    assert info.download_url
    app.close()


def test_check_update_malformed_server_version(tmp_path, clock):
    app = make_app(tmp_path / "s", clock, latest_version="one point two")
    info = ApiClient(InProcessTransport(app), clock=clock).check_update("1.0.0")
    assert info.update_available is None and "semantic version" in info.error
    app.close()


def test_check_update_network_failure_is_unknown(clock):
    class Down:
        def request(self, *a, **k):
            raise NetworkError("down")

    info = ApiClient(Down(), clock=clock).check_update("1.0.0")
    assert info.update_available is None and info.error


def test_semver_ordering():
    assert parse_semver("1.0.0-alpha") < parse_semver("1.0.0-alpha.1") < parse_semver("1.0.0-beta")
    assert parse_semver("1.0.0-rc.1") < parse_semver("1.0.0") < parse_semver("1.0.1")
    assert parse_semver("1.0.0+build.5") == parse_semver("1.0.0")
    with pytest.raises(ValueError):
        parse_semver("1.0")


# -- backoff ---------------------------------------------------------------------------


@settings(max_examples=200)
@given(st.integers(1, 5000), st.integers(0, 100_000), st.integers(0, 2**32), st.integers(1, 40))
def test_backoff_non_decreasing_and_capped(base, extra, seed, n):
    b = Backoff(base, base + extra, rng=random.Random(seed))
    seq = [b.next() for _ in range(n)]
    assert all(x <= y for x, y in zip(seq, seq[1:]))
    assert all(0 < x <= (base + extra) / 1000 for x in seq)
    assert base / 1000 * 0.8 <= seq[0] <= base / 1000 * 1.2
    b.reset()
    assert b.next() <= base / 1000 * 1.2


def test_config_validation():
    with pytest.raises(ValueError):
        UploaderConfig(send_interval_s=0)
    with pytest.raises(ValueError):
        UploaderConfig(backoff_base_ms=10_000, backoff_max_ms=100)


# -- upload loop -------------------------------------------------------------------------


def test_hundred_records_delivered_exactly(tmp_path, app, clock):
    up = make_uploader(tmp_path, app, clock, batch_max=30)
    for i in range(100):
        up.store.append(make_record(i))
    assert up.cycle() == 60.0
    assert len(app.store.records) == 100
    assert up.store.counts() == {"pending": 0, "in_flight": 0, "acked": 100}
    assert [n for _, _, n in up.sent_batches] == [30, 30, 30, 10]


def test_server_down_three_cycles_then_up(tmp_path, app, clock):
    sw = Switch(app)
    up = make_uploader(tmp_path, app, clock, transport=sw)
    for i in range(20):
        up.store.append(make_record(i))
    sw.down = True
    delays = []
    for _ in range(3):
        delays.append(up.cycle())
        clock.advance(delays[-1])
    assert delays == sorted(delays) and delays[0] < 1.0
    assert len(app.store.records) == 0
    sw.down = False
    assert up.cycle() == 60.0
    assert len(app.store.records) == 20
    assert up.store.counts()["acked"] == 20


def test_outage_mid_batch_retries_same_batch(tmp_path, app, clock):
    class DropReply(Switch):
        def request(self, method, path, **kw):
            resp = self.inner.request(method, path, **kw)
            if path == "/api/v1/ingest" and self.down:
                self.down = False
                raise NetworkError("reply lost")
            return resp

    sw = DropReply(app)
    up = make_uploader(tmp_path, app, clock, transport=sw)
    for i in range(5):
        up.store.append(make_record(i))
    sw.down = True
    up.cycle()
    first = up.inflight.batch_id
    assert len(app.store.records) == 5  # stored, but the ack was lost
    up.cycle()
    assert up.inflight is None and up.sent_batches[0][1] == first
    assert len(app.store.records) == 5 and up.store.counts()["acked"] == 5


def test_empty_store_idles(tmp_path, app, clock):
    sw = Switch(app)
    up = make_uploader(tmp_path, app, clock, transport=sw)
    up.cycle()
    sw.calls.clear()
    for _ in range(3):
        clock.advance(up.cycle())
    assert all(c in ("GET /api/v1/config",) for c in sw.calls)
    assert "POST /api/v1/ingest" not in sw.calls


def test_proactive_token_refresh(tmp_path, app, clock):
    sw = Switch(app)
    up = make_uploader(tmp_path, app, clock, transport=sw)
    up.cycle()
    sw.calls.clear()
    clock.advance(3300)  # 300 s left of 3600 is under 10%
    up.cycle()
    assert sw.calls[0] == "POST /api/v1/auth/login"


def test_expired_token_triggers_relogin_and_batch_succeeds(tmp_path, clock):
    app = setup_server(tmp_path / "s", clock, token_lifetime_s=60)
    up = make_uploader(tmp_path, app, clock)
    up.cycle()
    first = up.token
    for i in range(3):
        up.store.append(make_record(i))
    # token still looks fresh locally but the server has been told it expired
    clock.advance(61)
    up.token = type(first)(first.token, clock.now() + timedelta(hours=1), clock.now())
    up.cycle()
    assert up.token.token != first.token
    assert len(app.store.records) == 3
    app.close()


def test_wrong_password_halts_with_fatal_report(tmp_path, app, clock, client):
    client.register(EMAIL, "the-real-password")
    up = make_uploader(tmp_path, app, clock)
    with pytest.raises(UploaderHalted):
        up.cycle()
    assert up.halted and up.reports[-1].severity == "fatal"
    with pytest.raises(UploaderHalted):
        up.cycle()


def test_lost_register_reply_does_not_halt(tmp_path, app, clock):
    class LoseFirstRegisterReply(Switch):
        def request(self, method, path, **kw):
            resp = self.inner.request(method, path, **kw)
            if path.endswith("/register") and not self.down:
                self.down = True
                raise NetworkError("reply lost")
            return resp

    up = make_uploader(tmp_path, app, clock, transport=LoseFirstRegisterReply(app))
    assert up.cycle() < 1.0  # transient
    assert up.cycle() == 60.0 and up.token is not None


def test_error_reports_buffered_across_outage(tmp_path, app, clock, admin_token, client):
    sw = Switch(app)
    up = make_uploader(tmp_path, app, clock, transport=sw)
    up.report_error("error", "disk nearly full", free_mb=12)
    sw.down = True
    up.cycle()
    assert len(up.reports) == 1
    sw.down = False
    up.cycle()
    assert not up.reports
    (listed,) = client.list_errors(admin_token)
    assert listed["message"] == "disk nearly full" and listed["context"] == {"free_mb": "12"}
    assert listed["mac_address"] == "aa:bb"


def test_report_buffer_drops_oldest(tmp_path, app, clock, caplog):
    up = make_uploader(tmp_path, app, clock)
    for i in range(1001):
        up.report_error("warn", f"report {i}")
    assert len(up.reports) == 1000 and up.dropped_reports == 1
    assert up.reports[0].message == "report 1"
    assert "dropped the oldest" in caplog.text


def test_rejected_batch_is_quarantined(tmp_path, app, clock, admin_token, client):
    class Rejecting(Switch):
        def request(self, method, path, **kw):
            if path == "/api/v1/ingest":
                return Response(422, b'{"error": "invalid records", "details": []}')
            return self.inner.request(method, path, **kw)

    up = make_uploader(tmp_path, app, clock, transport=Rejecting(app))
    recs = [make_record(i) for i in range(3)]
    for r in recs:
        up.store.append(r)
    up.cycle()
    (path,) = (tmp_path / "agent" / "deadletter").iterdir()
    assert [decode_record(line) for line in path.read_text().splitlines()] == recs
    assert up.store.counts() == {"pending": 0, "in_flight": 0, "acked": 3}
    up.cycle()  # report goes out on the next cycle
    (listed,) = client.list_errors(admin_token)
    assert listed["severity"] == "fatal" and path.stem in listed["message"]


def test_server_config_adopted(tmp_path, clock):
    app = setup_server(tmp_path / "s", clock, send_interval_s=5)
    seen = []
    up = make_uploader(tmp_path, app, clock)
    up.on_config = seen.append
    assert up.cycle() == 5.0
    assert seen[0]["send_interval_s"] == 5
    app.close()


# -- exactly-once under faults ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(100))
def test_exactly_once_under_random_fault_schedules(tmp_path, seed):
    rng = random.Random(seed)
    crash = rng.choice((None,) + CRASH_POINTS)
    res = run_pipeline(tmp_path, scenario=rng.choice(["threeproc.json", "pidreuse.json", "churn.json"]),
                       ticks=rng.randint(4, 10), crash_point=crash, crash_after=rng.randint(1, 4),
                       fault_seed=seed, p_fault=0.3)
    try:
        assert res.server_ids == res.appended | res.recovered
        assert res.appended <= res.server_ids
        assert res.agent.store.counts()["pending"] == 0
        assert res.agent.store.counts()["in_flight"] == 0
    finally:
        close(res)
