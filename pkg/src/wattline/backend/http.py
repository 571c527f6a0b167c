"""Minimal request/response types, routing, and a threaded stdlib HTTP server."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qsl, urlsplit

log = logging.getLogger(__name__)


class HttpError(Exception):
    def __init__(self, status: int, error: str, details: list | None = None):
        self.status = status
        self.error = error
        self.details = details or []
        super().__init__(f"{status} {error}")


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str] = field(default_factory=dict)
    headers: dict[str, str] = field(default_factory=dict)  # lower-cased names
    body: bytes = b""

    @classmethod
    def build(cls, method: str, target: str, headers: dict | None = None, body: bytes = b"") -> Request:
        parts = urlsplit(target)
        query = dict(parse_qsl(parts.query, keep_blank_values=True))
        hdrs = {k.lower(): v for k, v in (headers or {}).items()}
        return cls(method.upper(), parts.path, query, hdrs, body)

    def json(self):
        try:
            return json.loads(self.body.decode("utf-8") or "null")
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HttpError(400, "malformed JSON body", [str(exc)]) from None

    @property
    def bearer(self) -> str | None:
        auth = self.headers.get("authorization", "")
        scheme, _, token = auth.partition(" ")
        if scheme.lower() != "bearer" or not token.strip():
            return None
        return token.strip()


@dataclass
class Response:
    status: int
    body: bytes = b""
    content_type: str = "application/json"

    def json(self):
        return json.loads(self.body.decode("utf-8"))

    @property
    def text(self) -> str:
        return self.body.decode("utf-8")


def json_response(obj, status: int = 200) -> Response:
    return Response(status, json.dumps(obj, ensure_ascii=False).encode("utf-8"))


def error_response(exc: HttpError) -> Response:
    return json_response({"error": exc.error, "details": exc.details}, exc.status)


Handler = Callable[[Request], Response]


class Router:
    def __init__(self):
        self._routes: dict[str, dict[str, Handler]] = {}

    def add(self, method: str, path: str, handler: Handler) -> None:
        self._routes.setdefault(path, {})[method.upper()] = handler

    def dispatch(self, request: Request) -> Response:
        methods = self._routes.get(request.path.rstrip("/") or "/")
        try:
            if methods is None:
                raise HttpError(404, "not found")
            handler = methods.get(request.method)
            if handler is None:
                raise HttpError(405, "method not allowed")
            return handler(request)
        except HttpError as exc:
            return error_response(exc)


class _Handler(BaseHTTPRequestHandler):
    app = None  # set per server
    protocol_version = "HTTP/1.1"

    def _handle(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        req = Request.build(self.command, self.path, dict(self.headers.items()), body)
        try:
            resp = self.app.handle(req)
        except Exception:
            log.exception("unhandled error for %s %s", self.command, self.path)
            resp = json_response({"error": "internal error", "details": []}, 500)
        self.send_response(resp.status)
        self.send_header("Content-Type", resp.content_type + "; charset=utf-8")
        self.send_header("Content-Length", str(len(resp.body)))
        self.end_headers()
        self.wfile.write(resp.body)

    do_GET = do_POST = do_PUT = do_DELETE = _handle

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)


class BackgroundServer:
    """Serve ``app`` on ``host:port`` from a daemon thread (port 0 picks a free port)."""

    def __init__(self, app, host: str = "127.0.0.1", port: int = 0):
        handler = type("Handler", (_Handler,), {"app": app})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> BackgroundServer:
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread.is_alive():
            self.httpd.shutdown()  # blocks until serve_forever returns, so only when running
            self._thread.join()
        self.httpd.server_close()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()
