"""Identity manager: password-grant bearer tokens plus a validation endpoint.

Tokens are 32 random bytes, base64 on the wire, resolvable to a subject
only by asking this service. Unknown users and wrong passwords fail with
the same error so the endpoint cannot be used to probe usernames.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import threading
import time
from dataclasses import dataclass

from .errors import AuthenticationFailed, InvalidToken
from .httpserver import JsonHttpService, Request, serve_from_cli

TOKEN_BYTES = 32
DEFAULT_TTL_SECONDS = 3600.0
DEFAULT_PBKDF2_ITERATIONS = 20_000
_SALT_LEN = 16


def _digest(password: str, salt: bytes, iterations: int) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)


@dataclass(frozen=True)
class Credential:
    username: str
    salt: bytes
    password_digest: bytes
    roles: frozenset[str]


@dataclass(frozen=True)
class AccessToken:
    token: str
    subject: str
    roles: frozenset[str]
    expires_at_ms: int


class CredentialStore:
    """Usernames to salted password digests; passwords never kept in clear.

    ``iterations`` trades hashing cost against bulk-provisioning speed;
    deployments with hundreds of machine accounts may lower it.
    """

    def __init__(self, iterations: int = DEFAULT_PBKDF2_ITERATIONS) -> None:
        self._credentials: dict[str, Credential] = {}
        self._iterations = int(iterations)

    @classmethod
    def from_records(
        cls, records: list[dict], iterations: int = DEFAULT_PBKDF2_ITERATIONS
    ) -> "CredentialStore":
        store = cls(iterations)
        for record in records:
            store.add(record["username"], record["password"], record["roles"])
        return store

    @classmethod
    def from_file(cls, path: str, iterations: int = DEFAULT_PBKDF2_ITERATIONS) -> "CredentialStore":
        with open(path, "r", encoding="utf-8") as fh:
            records = json.load(fh)
        if not isinstance(records, list):
            raise ValueError("credential bootstrap file must hold a JSON array")
        return cls.from_records(records, iterations)

    def add(self, username: str, password: str, roles: list[str] | set[str]) -> None:
        if username in self._credentials:
            raise ValueError(f"duplicate username: {username}")
        salt = os.urandom(_SALT_LEN)
        self._credentials[username] = Credential(
            username=username,
            salt=salt,
            password_digest=_digest(password, salt, self._iterations),
            roles=frozenset(roles),
        )

    def verify(self, username: str, password: str) -> frozenset[str]:
        credential = self._credentials.get(username)
        if credential is None:
            # Burn a hash anyway so lookups cost the same either way.
            _digest(password, bytes(_SALT_LEN), self._iterations)
            raise AuthenticationFailed("authentication-failed")
        candidate = _digest(password, credential.salt, self._iterations)
        if not hmac.compare_digest(candidate, credential.password_digest):
            raise AuthenticationFailed("authentication-failed")
        return credential.roles


class IdentityManager:
    """Issues fresh opaque tokens and validates them until expiry."""

    def __init__(self, store: CredentialStore, ttl_seconds: float = DEFAULT_TTL_SECONDS) -> None:
        self._store = store
        self._ttl_seconds = ttl_seconds
        self._tokens: dict[str, AccessToken] = {}
        self._lock = threading.Lock()

    @property
    def ttl_seconds(self) -> float:
        return self._ttl_seconds

    def issue_token(self, username: str, password: str) -> AccessToken:
        roles = self._store.verify(username, password)
        value = base64.urlsafe_b64encode(os.urandom(TOKEN_BYTES)).decode("ascii")
        token = AccessToken(
            token=value,
            subject=username,
            roles=roles,
            expires_at_ms=int((time.time() + self._ttl_seconds) * 1000),
        )
        with self._lock:
            self._tokens[value] = token
        return token

    def validate_token(self, value: str) -> tuple[str, frozenset[str]]:
        with self._lock:
            token = self._tokens.get(value)
            if token is None:
                raise InvalidToken("invalid-token")
            if time.time() * 1000 >= token.expires_at_ms:
                del self._tokens[value]
                raise InvalidToken("invalid-token")
        return token.subject, token.roles


# ---------------------------------------------------------------------------
# HTTP service


def build_service(config: dict) -> JsonHttpService:
    iterations = int(config.get("pbkdf2_iterations", DEFAULT_PBKDF2_ITERATIONS))
    if "credentials_file" in config:
        store = CredentialStore.from_file(config["credentials_file"], iterations)
    else:
        store = CredentialStore.from_records(config.get("credentials", []), iterations)
    manager = IdentityManager(store, float(config.get("token_ttl_seconds", DEFAULT_TTL_SECONDS)))
    service = JsonHttpService(
        "idm",
        host=config.get("host", "127.0.0.1"),
        port=int(config.get("port", 0)),
        wire_log_path=config.get("wire_log"),
    )

    def issue(request: Request) -> tuple[int, object]:
        body = request.json()
        if not isinstance(body, dict) or "username" not in body or "password" not in body:
            return 400, {"error": "username and password required"}
        try:
            token = manager.issue_token(str(body["username"]), str(body["password"]))
        except AuthenticationFailed:
            return 401, {"error": "authentication-failed"}
        return 201, {
            "access_token": token.token,
            "expires_in": int(manager.ttl_seconds),
            "roles": sorted(token.roles),
        }

    def validate(request: Request) -> tuple[int, object]:
        value = request.query.get("token", "")
        try:
            subject, roles = manager.validate_token(value)
        except InvalidToken:
            return 401, {"error": "invalid-token"}
        return 200, {"subject": subject, "roles": sorted(roles)}

    service.add_route("POST", "/v1/tokens", issue)
    service.add_route("GET", "/v1/tokens/validate", validate)
    service.manager = manager  # exposed for in-process tests
    return service


def main(argv: list[str] | None = None) -> int:
    return serve_from_cli(build_service, argv)


if __name__ == "__main__":
    raise SystemExit(main())
