"""Authorization service: registration, login, and token validation."""

from __future__ import annotations

import re
from datetime import timedelta

from wattline.backend.auth import Claims, TokenError, TokenSigner, hash_password, verify_password
from wattline.backend.http import HttpError, Request, Response, Router, json_response
from wattline.backend.storage import ServerStore
from wattline.timeutil import format_ts

EMAIL_RE = re.compile(r"^[^@\s]+@[^@\s]+\.[^@\s]+$")
MIN_PASSWORD = 8


def _credentials(request: Request) -> tuple[str, str]:
    body = request.json()
    if not isinstance(body, dict):
        raise HttpError(422, "body must be a JSON object")
    email, password = body.get("email"), body.get("password")
    if not isinstance(email, str) or not isinstance(password, str):
        raise HttpError(422, "email and password are required strings")
    return email.strip().lower(), password


class AuthorizationService:
    def __init__(self, store: ServerStore, signer: TokenSigner, clock, iterations: int):
        self.store = store
        self.signer = signer
        self.clock = clock
        self.iterations = iterations
        # hashed once so unknown-email logins cost the same as wrong passwords
        self._dummy_hash = hash_password("not-a-real-password", iterations)

    def routes(self, router: Router) -> None:
        router.add("POST", "/api/v1/auth/register", self.register)
        router.add("POST", "/api/v1/auth/login", self.login)

    def register(self, request: Request) -> Response:
        email, password = _credentials(request)
        problems = []
        if not EMAIL_RE.match(email):
            problems.append("email is not syntactically valid")
        if len(password) < MIN_PASSWORD:
            problems.append(f"password must be at least {MIN_PASSWORD} characters")
        if problems:
            raise HttpError(422, "invalid registration", problems)
        acct = self.store.create_account(email, hash_password(password, self.iterations),
                                         self.clock.now())
        if acct is None:
            raise HttpError(409, "account exists")
        return json_response({"user_id": acct.user_id, "role": acct.role}, 201)

    def login(self, request: Request) -> Response:
        email, password = _credentials(request)
        acct = self.store.account_by_email(email)
        ok = verify_password(password, acct.password_hash if acct else self._dummy_hash)
        if acct is None or not ok:
            raise HttpError(401, "invalid credentials")
        lifetime = self.store.config.token_lifetime_s
        expires_at = self.clock.now() + timedelta(seconds=lifetime)
        token = self.signer.issue(acct.user_id, acct.role, expires_at)
        return json_response({"token": token, "expires_at": format_ts(expires_at),
                              "user_id": acct.user_id, "role": acct.role})

    # -- used by the other services --------------------------------------------

    def authenticate(self, request: Request) -> Claims:
        token = request.bearer
        if token is None:
            raise HttpError(401, "missing bearer token")
        try:
            claims = self.signer.verify(token, self.clock.now())
        except TokenError as exc:
            raise HttpError(401, str(exc)) from None
        if claims.user_id not in self.store.accounts:
            raise HttpError(401, "unknown account")
        return claims

    def require_admin(self, request: Request) -> Claims:
        claims = self.authenticate(request)
        if claims.role != "admin":
            raise HttpError(403, "admin role required")
        return claims
