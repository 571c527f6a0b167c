import uuid
from datetime import timedelta

import pytest

from wattline import faults
from wattline.backend import BackendApp, ServerSettings
from wattline.records import ProcessIdentity, ProcessRecord, ResourceUsage, Status
from wattline.sim import DEFAULT_EPOCH
from wattline.timeutil import ManualClock
from wattline.uploader import ApiClient, InProcessTransport

SECRET = "test-secret-0123456789abcdef0123"
T0 = DEFAULT_EPOCH


def make_record(i: int = 0, name: str = "proc", start_s: float = 0.0, length_s: float = 1.0,
                cpu: float = 0.25, **kw) -> ProcessRecord:
    defaults = dict(
        record_id=uuid.UUID(int=i + 1),
        identity=ProcessIdentity(1000 + i, T0),
        process_name=name,
        status=Status.IDLE,
        interval_start=T0 + timedelta(seconds=start_s),
        interval_end=T0 + timedelta(seconds=start_s + length_s),
        usage=ResourceUsage(cpu, 1e6, 10.0, 20.0, 3.0),
        description="a process",
        energy_j=0.5,
        ip_address="10.0.0.1",
        mac_address="aa:bb:cc:dd:ee:ff",
    )
    defaults.update(kw)
    return ProcessRecord(**defaults)


@pytest.fixture(autouse=True)
def _reset_faults():
    faults.disarm_all()
    yield
    faults.disarm_all()


@pytest.fixture
def clock():
    return ManualClock(T0)


def make_app(data_dir, clock, **kw) -> BackendApp:
    settings = ServerSettings(data_dir=str(data_dir), secret=SECRET, password_iterations=1000,
                              latest_version=kw.pop("latest_version", "1.1.0"),
                              download_url="https://example.invalid/wattline-1.1.0.tar.gz",
                              fsync=kw.pop("fsync", False))
    return BackendApp(settings, clock=clock)


@pytest.fixture
def app(tmp_path, clock):
    a = make_app(tmp_path / "server", clock)
    yield a
    a.close()


@pytest.fixture
def client(app, clock):
    return ApiClient(InProcessTransport(app), clock=clock)


@pytest.fixture
def admin_token(client):
    client.register("admin@example.com", "admin-password")
    return client.login("admin@example.com", "admin-password")


@pytest.fixture
def user_token(client, admin_token):
    client.register("user@example.com", "user-password")
    return client.login("user@example.com", "user-password")


# acceptance results, filled by tests/test_acceptance.py: (number, title, passed, seconds, budget)
ACCEPTANCE: list[tuple[int, str, bool, float, float]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, passed, elapsed, budget in sorted(ACCEPTANCE):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict} {n:2d}. {title} ({elapsed:.2f}s, budget {budget:g}s)")
