"""Analytic service: record ingestion, search, CSV export, and per-process summaries."""

from __future__ import annotations

import math
from datetime import datetime

from wattline.backend.authorization import AuthorizationService
from wattline.backend.http import HttpError, Request, Response, Router, json_response
from wattline.backend.storage import ServerStore
from wattline.csvio import records_to_csv
from wattline.records import (
    ProcessRecord,
    RecordDecodeError,
    Status,
    record_from_dict,
    record_to_dict,
    validate_record,
)
from wattline.timeutil import parse_ts

DEFAULT_LIMIT = 1000
MAX_LIMIT = 10000
GROUP_KEYS = ("process_name",)


def _ts_param(request: Request, name: str) -> datetime | None:
    raw = request.query.get(name, "")
    if raw == "":
        return None
    try:
        return parse_ts(raw)
    except ValueError as exc:
        raise HttpError(422, f"invalid '{name}' timestamp", [str(exc)]) from None


def _int_param(request: Request, name: str, default: int, lo: int, hi: int | None = None) -> int:
    raw = request.query.get(name, "")
    if raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise HttpError(422, f"'{name}' must be an integer") from None
    if value < lo or (hi is not None and value > hi):
        raise HttpError(422, f"'{name}' must be between {lo} and {hi}")
    return value


class AnalyticService:
    def __init__(self, store: ServerStore, auth: AuthorizationService, clock):
        self.store = store
        self.auth = auth
        self.clock = clock

    def routes(self, router: Router) -> None:
        router.add("POST", "/api/v1/ingest", self.ingest)
        router.add("GET", "/api/v1/records", self.search)
        router.add("GET", "/api/v1/export", self.export)
        router.add("GET", "/api/v1/summary", self.summary)

    def ingest(self, request: Request) -> Response:
        claims = self.auth.authenticate(request)
        body = request.json()
        if not isinstance(body, dict) or not isinstance(body.get("records"), list):
            raise HttpError(422, "body must be {batch_id, records: [...]}")
        batch_id = body.get("batch_id")
        if batch_id is not None and not isinstance(batch_id, str):
            raise HttpError(422, "batch_id must be a string")
        records: list[ProcessRecord] = []
        errors = []
        for i, obj in enumerate(body["records"]):
            rid = obj.get("record_id") if isinstance(obj, dict) else None
            try:
                rec = record_from_dict(obj)
            except RecordDecodeError as exc:
                errors.append({"index": i, "record_id": rid, "errors": [str(exc)]})
                continue
            problems = validate_record(rec)
            if problems:
                errors.append({"index": i, "record_id": rid, "errors": problems})
            records.append(rec)
        if errors:
            raise HttpError(422, "invalid records", errors)
        accepted, duplicates = self.store.ingest(claims.user_id, records, batch_id,
                                                 self.clock.now())
        return json_response({"accepted": accepted, "duplicates": duplicates})

    def _target_user(self, request: Request, claims) -> str:
        other = request.query.get("user_id", "")
        if other == "":
            return claims.user_id
        if claims.role != "admin":
            raise HttpError(403, "only admins may query other users")
        return other

    def _filtered(self, request: Request) -> list[ProcessRecord]:
        claims = self.auth.authenticate(request)
        owner = self._target_user(request, claims)
        start, end = _ts_param(request, "from"), _ts_param(request, "to")
        status = request.query.get("status") or None
        if status is not None and status not in {s.value for s in Status}:
            raise HttpError(422, "status must be focus or idle")
        if start is not None and end is not None and start > end:
            return []
        return self.store.query(owner, name_contains=request.query.get("name_contains") or None,
                                status=status, start=start, end=end)

    def search(self, request: Request) -> Response:
        limit = _int_param(request, "limit", DEFAULT_LIMIT, 1, MAX_LIMIT)
        offset = _int_param(request, "offset", 0, 0)
        rows = self._filtered(request)
        page = rows[offset : offset + limit]
        return json_response({"records": [record_to_dict(r) for r in page],
                              "total": len(rows), "limit": limit, "offset": offset})

    def export(self, request: Request) -> Response:
        rows = self._filtered(request)
        return Response(200, records_to_csv(rows).encode("utf-8"), content_type="text/csv")

    def summary(self, request: Request) -> Response:
        group_by = request.query.get("group_by", "process_name")
        if group_by not in GROUP_KEYS:
            raise HttpError(422, f"unknown group_by {group_by!r}", list(GROUP_KEYS))
        groups: dict[str, dict] = {}
        for rec in self._filtered(request):
            g = groups.setdefault(rec.process_name, {"process_name": rec.process_name,
                                                     "record_count": 0, "_cpu": [], "_e": []})
            g["record_count"] += 1
            g["_cpu"].append((rec.usage.cpu_fraction or 0.0) * rec.duration_s)
            g["_e"].append(rec.energy_j or 0.0)
        out = []
        for g in groups.values():
            out.append({"process_name": g["process_name"], "record_count": g["record_count"],
                        "cpu_seconds": math.fsum(g["_cpu"]),
                        "total_energy_j": math.fsum(g["_e"])})
        out.sort(key=lambda g: (-g["total_energy_j"], g["process_name"]))
        return json_response({"group_by": group_by, "groups": out})
