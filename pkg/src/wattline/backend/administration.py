"""Administration service: runtime config, client error reports, version info."""

from __future__ import annotations

from wattline.backend.authorization import AuthorizationService
from wattline.backend.http import HttpError, Request, Response, Router, json_response
from wattline.backend.storage import ServerStore, merge_config
from wattline.timeutil import parse_ts

SEVERITIES = ("warn", "error", "fatal")


class AdministrationService:
    def __init__(self, store: ServerStore, auth: AuthorizationService, clock,
                 latest_version: str, download_url: str):
        self.store = store
        self.auth = auth
        self.clock = clock
        self.latest_version = latest_version
        self.download_url = download_url

    def routes(self, router: Router) -> None:
        router.add("GET", "/api/v1/config", self.get_config)
        router.add("PUT", "/api/v1/config", self.put_config)
        router.add("POST", "/api/v1/errors", self.post_error)
        router.add("GET", "/api/v1/errors", self.list_errors)
        router.add("GET", "/api/v1/version", self.version)

    def get_config(self, request: Request) -> Response:
        self.auth.authenticate(request)
        return json_response(self.store.config.to_json())

    def put_config(self, request: Request) -> Response:
        self.auth.require_admin(request)
        config, problems = merge_config(self.store.config, request.json())
        if problems:
            raise HttpError(422, "invalid config", problems)
        self.store.set_config(config)
        return json_response(config.to_json())

    def post_error(self, request: Request) -> Response:
        claims = self.auth.authenticate(request)
        body = request.json()
        if not isinstance(body, dict):
            raise HttpError(422, "body must be a JSON object")
        problems = []
        message = body.get("message")
        if not isinstance(message, str) or not message.strip():
            problems.append("message must be a non-empty string")
        severity = body.get("severity")
        if severity not in SEVERITIES:
            problems.append(f"severity must be one of {', '.join(SEVERITIES)}")
        mac = body.get("mac_address", "")
        if not isinstance(mac, str):
            problems.append("mac_address must be a string")
        context = body.get("context", {})
        if not isinstance(context, dict):
            problems.append("context must be an object")
        timestamp = self.clock.now()
        if "timestamp" in body:
            try:
                timestamp = parse_ts(body["timestamp"])
            except ValueError as exc:
                problems.append(str(exc))
        if problems:
            raise HttpError(422, "invalid error report", problems)
        report = self.store.add_error(claims.user_id, self.clock.now(), mac, timestamp,
                                      severity, message, context)
        return json_response({"report_id": report.report_id}, 201)

    def list_errors(self, request: Request) -> Response:
        self.auth.require_admin(request)
        return json_response({"errors": [r.to_json() for r in self.store.list_errors()]})

    def version(self, request: Request) -> Response:
        return json_response({"latest_version": self.latest_version,
                              "download_url": self.download_url})
