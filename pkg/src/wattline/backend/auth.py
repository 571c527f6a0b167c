"""Password hashing and signed bearer tokens.

Token format: ``b64url(payload) "." b64url(HMAC-SHA256(payload, secret))`` where
``payload`` is compact JSON ``{"user_id", "role", "expires_at"}`` and
``expires_at`` is epoch milliseconds. Both segments must be canonical
unpadded base64url, so no two distinct strings verify as the same token.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import secrets
from dataclasses import dataclass
from datetime import datetime

from wattline.timeutil import from_epoch_ms, to_epoch_ms

DEFAULT_ITERATIONS = 200_000
_ALGO = "pbkdf2_sha256"


def hash_password(password: str, iterations: int = DEFAULT_ITERATIONS, salt: bytes | None = None) -> str:
    salt = salt or secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return f"{_ALGO}${iterations}${b64url_encode(salt)}${b64url_encode(digest)}"


def verify_password(password: str, encoded: str) -> bool:
    try:
        algo, iters, salt, digest = encoded.split("$")
        if algo != _ALGO:
            return False
        expected = b64url_decode(digest)
        actual = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"),
                                     b64url_decode(salt), int(iters))
    except (ValueError, TypeError):
        return False
    return hmac.compare_digest(actual, expected)


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict unpadded base64url decode; non-canonical encodings are rejected."""
    if not isinstance(text, str) or not text.isascii():
        raise ValueError("not base64url")
    try:
        data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError):
        raise ValueError("not base64url") from None
    if b64url_encode(data) != text:
        raise ValueError("non-canonical base64url")
    return data


class TokenError(Exception):
    pass


@dataclass(frozen=True)
class Claims:
    user_id: str
    role: str
    expires_at: datetime


class TokenSigner:
    def __init__(self, secret: bytes | str):
        if isinstance(secret, str):
            secret = secret.encode("utf-8")
        if len(secret) < 16:
            raise ValueError("server secret must be at least 16 bytes")
        self._secret = secret

    def _mac(self, payload: bytes) -> bytes:
        return hmac.new(self._secret, payload, hashlib.sha256).digest()

    def issue(self, user_id: str, role: str, expires_at: datetime) -> str:
        payload = json.dumps(
            {"user_id": user_id, "role": role, "expires_at": to_epoch_ms(expires_at)},
            separators=(",", ":"), sort_keys=True,
        ).encode("utf-8")
        return f"{b64url_encode(payload)}.{b64url_encode(self._mac(payload))}"

    def verify(self, token: str, now: datetime) -> Claims:
        parts = token.split(".") if isinstance(token, str) else []
        if len(parts) != 2:
            raise TokenError("malformed token")
        try:
            payload = b64url_decode(parts[0])
            sig = b64url_decode(parts[1])
        except ValueError:
            raise TokenError("malformed token") from None
        if not hmac.compare_digest(sig, self._mac(payload)):
            raise TokenError("bad signature")
        try:
            obj = json.loads(payload)
            claims = Claims(str(obj["user_id"]), str(obj["role"]),
                            from_epoch_ms(int(obj["expires_at"])))
        except (ValueError, KeyError, TypeError):
            raise TokenError("malformed token payload") from None
        if now >= claims.expires_at:
            raise TokenError("token expired")
        return claims
