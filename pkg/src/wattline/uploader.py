"""Authenticated upload loop: tokens, batched sends with retry, error reports, update checks."""

from __future__ import annotations

import collections
import json
import logging
import os
import random
import re
import ssl
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable
from urllib.parse import urlencode

from wattline.backend.http import Request, Response
from wattline.faults import crashpoint
from wattline.records import encode_record, record_to_dict
from wattline.store import Batch, LocalStore
from wattline.timeutil import SystemClock, format_ts, parse_ts

log = logging.getLogger(__name__)

REPORT_BUFFER_MAX = 1000


# ---------------------------------------------------------------------------
# errors


class ClientError(Exception):
    pass


class TransientError(ClientError):
    """Worth retrying later: network trouble or a 5xx."""


class NetworkError(TransientError):
    pass


class AuthenticationError(ClientError):
    """HTTP 401: bad credentials or an invalid/expired token."""


class PermanentError(ClientError):
    """A 4xx other than 401; retrying the same request cannot succeed."""

    def __init__(self, status: int, message: str, details=None):
        self.status = status
        self.details = details or []
        super().__init__(f"{status} {message}")


class AccountExistsError(PermanentError):
    pass


class UploaderHalted(ClientError):
    pass


# ---------------------------------------------------------------------------
# transports


class HttpTransport:
    def __init__(self, base_url: str, timeout: float = 10.0, ca_bundle: str | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._ctx = ssl.create_default_context(cafile=ca_bundle) if ca_bundle else None

    def request(self, method: str, path: str, *, body=None, query: dict | None = None,
                token: str | None = None) -> Response:
        url = self.base_url + path
        if query:
            url += "?" + urlencode({k: v for k, v in query.items() if v is not None})
        data = json.dumps(body).encode("utf-8") if body is not None else None
        req = urllib.request.Request(url, data=data, method=method)
        if data is not None:
            req.add_header("Content-Type", "application/json")
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout, context=self._ctx) as resp:
                return Response(resp.status, resp.read(), resp.headers.get_content_type())
        except urllib.error.HTTPError as exc:
            return Response(exc.code, exc.read(), exc.headers.get_content_type())
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise NetworkError(f"{method} {url}: {exc}") from exc


class InProcessTransport:
    """Calls a :class:`~wattline.backend.app.BackendApp` directly, no sockets."""

    def __init__(self, app):
        self.app = app

    def request(self, method: str, path: str, *, body=None, query: dict | None = None,
                token: str | None = None) -> Response:
        target = path
        if query:
            target += "?" + urlencode({k: v for k, v in query.items() if v is not None})
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        data = json.dumps(body).encode("utf-8") if body is not None else b""
        return self.app.handle(Request.build(method, target, headers, data))


# ---------------------------------------------------------------------------
# client


@dataclass(frozen=True)
class AuthToken:
    token: str
    expires_at: datetime
    issued_at: datetime

    def usable(self, now: datetime) -> bool:
        return bool(self.token) and now < self.expires_at

    def needs_refresh(self, now: datetime) -> bool:
        lifetime = (self.expires_at - self.issued_at).total_seconds()
        return (self.expires_at - now).total_seconds() < 0.1 * lifetime


@dataclass(frozen=True)
class IngestAck:
    accepted: int
    duplicates: int


@dataclass(frozen=True)
class ErrorReport:
    mac_address: str
    timestamp: datetime
    severity: str  # warn | error | fatal
    message: str
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.message:
            raise ValueError("error report message must be non-empty")
        if self.severity not in ("warn", "error", "fatal"):
            raise ValueError(f"bad severity {self.severity!r}")

    def to_json(self) -> dict:
        return {"mac_address": self.mac_address, "timestamp": format_ts(self.timestamp),
                "severity": self.severity, "message": self.message, "context": self.context}


@dataclass(frozen=True)
class UpdateInfo:
    latest_version: str | None
    download_url: str | None
    update_available: bool | None  # None: unknown
    error: str | None = None


_SEMVER = re.compile(
    r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)"
    r"(?:-([0-9A-Za-z-]+(?:\.[0-9A-Za-z-]+)*))?(?:\+[0-9A-Za-z-]+(?:\.[0-9A-Za-z-]+)*)?$"
)


def parse_semver(text: str) -> tuple:
    """Sort key for a semantic version string; raises ``ValueError`` if malformed."""
    m = _SEMVER.match(text.strip()) if isinstance(text, str) else None
    if not m:
        raise ValueError(f"not a semantic version: {text!r}")
    core = tuple(int(x) for x in m.group(1, 2, 3))
    if m.group(4) is None:
        return core + ((1,),)
    pre = tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in m.group(4).split("."))
    return core + ((0,) + pre,)


def _error_message(resp: Response) -> tuple[str, list]:
    try:
        obj = resp.json()
        return str(obj.get("error", "")), obj.get("details", [])
    except (ValueError, AttributeError):
        return resp.text[:200], []


class ApiClient:
    def __init__(self, transport, clock=None):
        self.transport = transport
        self.clock = clock or SystemClock()

    def _call(self, method: str, path: str, *, body=None, query=None, token: str | None = None,
              expect=(200,)) -> Response:
        resp = self.transport.request(method, path, body=body, query=query, token=token)
        if resp.status in expect:
            return resp
        message, details = _error_message(resp)
        if resp.status == 401:
            raise AuthenticationError(message or "unauthorized")
        if resp.status == 409:
            raise AccountExistsError(409, message or "account exists", details)
        if resp.status >= 500 or resp.status == 429:
            raise TransientError(f"{resp.status} {message}")
        raise PermanentError(resp.status, message, details)

    def _token(self, token: AuthToken) -> str:
        if not token.usable(self.clock.now()):
            raise AuthenticationError("token expired")
        return token.token

    def register(self, email: str, password: str) -> None:
        self._call("POST", "/api/v1/auth/register", body={"email": email, "password": password},
                   expect=(201,))

    def login(self, email: str, password: str) -> AuthToken:
        issued = self.clock.now()
        obj = self._call("POST", "/api/v1/auth/login",
                         body={"email": email, "password": password}).json()
        return AuthToken(obj["token"], parse_ts(obj["expires_at"]), issued)

    def send_batch(self, batch: Batch, token: AuthToken) -> IngestAck:
        if not batch.records:
            raise ValueError("empty batch")
        body = {"batch_id": str(batch.batch_id),
                "records": [record_to_dict(r) for r in batch.records]}
        obj = self._call("POST", "/api/v1/ingest", body=body, token=self._token(token)).json()
        return IngestAck(obj["accepted"], obj["duplicates"])

    def report_error(self, report: ErrorReport, token: AuthToken) -> None:
        self._call("POST", "/api/v1/errors", body=report.to_json(), token=self._token(token),
                   expect=(201,))

    def get_config(self, token: AuthToken) -> dict:
        return self._call("GET", "/api/v1/config", token=self._token(token)).json()

    def put_config(self, changes: dict, token: AuthToken) -> dict:
        return self._call("PUT", "/api/v1/config", body=changes, token=self._token(token)).json()

    def search(self, token: AuthToken, **filters) -> dict:
        return self._call("GET", "/api/v1/records", query=filters, token=self._token(token)).json()

    def export_csv(self, token: AuthToken, **filters) -> str:
        return self._call("GET", "/api/v1/export", query=filters, token=self._token(token)).text

    def list_errors(self, token: AuthToken) -> list[dict]:
        return self._call("GET", "/api/v1/errors", token=self._token(token)).json()["errors"]

    def check_update(self, current_version: str) -> UpdateInfo:
        """Compare ``current_version`` with the server's advertised release. Never raises
        for server-side problems; they come back as ``update_available=None``."""
        current = parse_semver(current_version)
        try:
            obj = self._call("GET", "/api/v1/version").json()
        except ClientError as exc:
            log.warning("update check failed: %s", exc)
            return UpdateInfo(None, None, None, error=str(exc))
        latest, url = obj.get("latest_version"), obj.get("download_url")
        try:
            available = parse_semver(latest) > current
        except ValueError as exc:
            log.warning("server advertised a malformed version: %s", exc)
            return UpdateInfo(latest, url, None, error=str(exc))
        if available:
            log.info("update available: %s -> %s (%s)", current_version, latest, url)
        return UpdateInfo(latest, url, available)


# ---------------------------------------------------------------------------
# backoff


class Backoff:
    """Exponential backoff: base doubles per failure, +-``jitter`` multiplicative
    noise, then capped. Capping after jitter keeps the sequence non-decreasing."""

    def __init__(self, base_ms: float = 500, max_ms: float = 60_000, jitter: float = 0.2,
                 rng: random.Random | None = None):
        if base_ms > max_ms:
            raise ValueError("backoff base must not exceed the cap")
        self.base = base_ms / 1000.0
        self.cap = max_ms / 1000.0
        self.jitter = jitter
        self.rng = rng or random.Random()
        self.attempt = 0

    def next(self) -> float:
        raw = self.base * (2.0 ** min(self.attempt, 62))
        self.attempt += 1
        return min(self.cap, raw * self.rng.uniform(1 - self.jitter, 1 + self.jitter))

    def reset(self) -> None:
        self.attempt = 0


# ---------------------------------------------------------------------------
# upload loop


@dataclass
class UploaderConfig:
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
        if self.send_interval_s < 1:
            raise ValueError("send_interval_s must be >= 1")
        if self.batch_max < 1:
            raise ValueError("batch_max must be >= 1")
        if self.backoff_base_ms > self.backoff_max_ms:
            raise ValueError("backoff_base_ms must not exceed backoff_max_ms")


class Uploader:
    """Drains a :class:`LocalStore` to the server.

    Call :meth:`cycle` repeatedly; it returns how many seconds to wait before
    the next call (the send interval, or a backoff delay after a transient
    failure). A batch that failed transiently is retried under the same batch
    id on the next cycle; the server deduplicates by record id.
    """

    def __init__(self, store: LocalStore, client: ApiClient, config: UploaderConfig,
                 clock=None, deadletter_dir: str | Path | None = None, mac_address: str = "",
                 rng: random.Random | None = None,
                 on_config: Callable[[dict], None] | None = None):
        self.store = store
        self.client = client
        self.config = config
        self.clock = clock or client.clock
        self.deadletter_dir = Path(deadletter_dir or (store.directory / "deadletter"))
        self.mac_address = mac_address
        self.backoff = Backoff(config.backoff_base_ms, config.backoff_max_ms, rng=rng)
        self.on_config = on_config
        self.send_interval_s = config.send_interval_s
        self.token: AuthToken | None = None
        self.inflight: Batch | None = None
        self.reports: collections.deque[ErrorReport] = collections.deque()
        self.halted = False
        self.sent_batches: list[tuple[datetime, uuid.UUID, int]] = []
        self.dropped_reports = 0

    # -- auth -------------------------------------------------------------------

    def _login(self) -> None:
        cfg = self.config
        try:
            self.token = self.client.login(cfg.email, cfg.password)
            return
        except AuthenticationError:
            if not cfg.auto_register:
                raise
        try:
            self.client.register(cfg.email, cfg.password)
        except AccountExistsError:
            pass  # an earlier register may have succeeded with its reply lost
        self.token = self.client.login(cfg.email, cfg.password)

    def _ensure_token(self) -> None:
        now = self.clock.now()
        if self.token is None or not self.token.usable(now) or self.token.needs_refresh(now):
            self._login()

    def _with_auth(self, fn):
        """Run ``fn(token)``; on a 401 log in again once and retry."""
        self._ensure_token()
        try:
            return fn(self.token)
        except AuthenticationError:
            self.token = None
            self._login()
            return fn(self.token)

    # -- error reports ------------------------------------------------------------

    def report_error(self, severity: str, message: str, **context) -> None:
        """Queue a report for delivery on the next cycle. The queue is bounded;
        beyond it the oldest report is dropped."""
        report = ErrorReport(self.mac_address, self.clock.now(), severity, message,
                             {k: str(v) for k, v in context.items()})
        if len(self.reports) >= REPORT_BUFFER_MAX:
            self.reports.popleft()
            self.dropped_reports += 1
            log.warning("error report buffer full; dropped the oldest report")
        self.reports.append(report)

    def _flush_reports(self) -> None:
        while self.reports:
            report = self.reports[0]
            try:
                self._with_auth(lambda tok: self.client.report_error(report, tok))
            except PermanentError as exc:
                log.error("server rejected error report %r: %s", report.message, exc)
            except ClientError as exc:
                log.warning("could not deliver error report, will retry: %s", exc)
                return
            self.reports.popleft()

    # -- batches ------------------------------------------------------------------

    def _quarantine(self, batch: Batch, exc: PermanentError) -> None:
        self.deadletter_dir.mkdir(parents=True, exist_ok=True)
        path = self.deadletter_dir / f"{batch.batch_id}.log"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("".join(encode_record(r) + "\n" for r in batch.records))
            fh.flush()
            os.fsync(fh.fileno())
        log.error("batch %s rejected (%s); quarantined to %s", batch.batch_id, exc, path)
        self.report_error("fatal", f"batch {batch.batch_id} rejected by server: {exc}",
                          batch_id=batch.batch_id, records=len(batch), path=path)
        self.store.mark_acked(batch.batch_id)

    def _refresh_config(self) -> None:
        cfg = self._with_auth(self.client.get_config)
        interval = cfg.get("send_interval_s")
        if isinstance(interval, int) and interval >= 1 and interval != self.send_interval_s:
            log.info("send interval changed %s -> %s s", self.send_interval_s, interval)
            self.send_interval_s = interval
        if self.on_config is not None:
            self.on_config(cfg)

    def _drain(self) -> None:
        while True:
            batch = self.inflight or self.store.next_batch(self.config.batch_max)
            if batch is None:
                return
            self.inflight = batch
            crashpoint("uploader.before_send")
            try:
                ack = self._with_auth(lambda tok: self.client.send_batch(batch, tok))
            except PermanentError as exc:
                self._quarantine(batch, exc)
                self.inflight = None
                continue
            crashpoint("uploader.after_send")
            if ack.accepted + ack.duplicates != len(batch):
                raise TransientError(f"server acknowledged {ack.accepted + ack.duplicates} "
                                     f"of {len(batch)} records")
            self.store.mark_acked(batch.batch_id)
            self.inflight = None
            self.sent_batches.append((self.clock.now(), batch.batch_id, len(batch)))

    def cycle(self) -> float:
        """One upload cycle. Returns the delay in seconds before the next one."""
        if self.halted:
            raise UploaderHalted("uploader halted after a permanent authentication failure")
        try:
            self._ensure_token()
            self._refresh_config()
            self._flush_reports()
            self._drain()
        except AuthenticationError as exc:
            self.halted = True
            log.critical("authentication permanently rejected, halting uploader: %s", exc)
            self.report_error("fatal", f"uploader halted: {exc}")
            raise UploaderHalted(str(exc)) from exc
        except ClientError as exc:
            delay = self.backoff.next()
            log.warning("upload cycle failed (%s); retrying in %.2f s", exc, delay)
            return delay
        self.backoff.reset()
        return float(self.send_interval_s)

    def run(self, stop: Callable[[], bool] | None = None, max_cycles: int | None = None,
            wait: Callable[[float], object] | None = None) -> None:
        wait = wait or self.clock.sleep
        n = 0
        while (max_cycles is None or n < max_cycles) and not (stop and stop()):
            delay = self.cycle()
            n += 1
            wait(delay)


def run_uploader(store: LocalStore, config: UploaderConfig, clock=None, transport=None,
                 **kwargs) -> Uploader:
    """Build an uploader over HTTP (or ``transport``) and run it until stopped."""
    client = ApiClient(transport or HttpTransport(config.server_url, ca_bundle=config.ca_bundle),
                       clock=clock)
    run_kwargs = {k: kwargs.pop(k) for k in ("stop", "max_cycles", "wait") if k in kwargs}
    up = Uploader(store, client, config, clock=clock, **kwargs)
    up.run(**run_kwargs)
    return up
