"""Back-end composition: three services behind one router."""

from __future__ import annotations

import json
import logging
import secrets
from dataclasses import dataclass
from pathlib import Path

from wattline.backend.administration import AdministrationService
from wattline.backend.analytics import AnalyticService
from wattline.backend.auth import DEFAULT_ITERATIONS, TokenSigner
from wattline.backend.authorization import AuthorizationService
from wattline.backend.http import BackgroundServer, Request, Response, Router
from wattline.backend.storage import ServerStore
from wattline.timeutil import SystemClock

log = logging.getLogger(__name__)


@dataclass
class ServerSettings:
    data_dir: str
    secret: str
    listen: str = "127.0.0.1:8080"
    latest_version: str = "0.1.0"
    download_url: str = ""
    password_iterations: int = DEFAULT_ITERATIONS
    fsync: bool = True

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    @classmethod
    def load(cls, path: str | Path) -> ServerSettings:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(obj, dict):
            raise ValueError(f"{path}: server config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(obj) - known)
        if extra:
            raise ValueError(f"{path}: unknown key(s): {', '.join(extra)}")
        if "data_dir" not in obj:
            raise ValueError(f"{path}: 'data_dir' is required")
        if not obj.get("secret"):
            log.warning("no 'secret' configured; generating one, tokens will not survive a restart")
            obj["secret"] = secrets.token_urlsafe(32)
        return cls(**obj)


class BackendApp:
    """The whole HTTP surface. ``handle`` maps a :class:`Request` to a :class:`Response`
    and is safe to call from many threads."""

    def __init__(self, settings: ServerSettings, clock=None):
        self.settings = settings
        self.clock = clock or SystemClock()
        self.store = ServerStore(settings.data_dir, fsync=settings.fsync)
        signer = TokenSigner(settings.secret)
        self.auth = AuthorizationService(self.store, signer, self.clock,
                                         settings.password_iterations)
        self.admin = AdministrationService(self.store, self.auth, self.clock,
                                           settings.latest_version, settings.download_url)
        self.analytics = AnalyticService(self.store, self.auth, self.clock)
        self.router = Router()
        for service in (self.auth, self.admin, self.analytics):
            service.routes(self.router)

    def handle(self, request: Request) -> Response:
        return self.router.dispatch(request)

    def close(self) -> None:
        self.store.close()

    def serve(self, host: str | None = None, port: int | None = None) -> BackgroundServer:
        h, p = self.settings.host_port
        return BackgroundServer(self, host or h, p if port is None else port)
