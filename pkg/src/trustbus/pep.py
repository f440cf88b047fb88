"""Policy-enforcement proxy fronting a protected service.

Every request needs a valid X-Auth-Token (checked against the identity
manager) and a role matching the route; only then is it forwarded, with
X-Forwarded-Subject added, and the upstream response relayed verbatim.
Rejected requests never reach the upstream.

``required_role`` may be a single role for the whole instance or a list of
``{"method","path","role"}`` rules (first match wins, path is a glob) for
services whose routes split between producer and consumer roles, like the
key vault. Validation results can be cached for a short TTL via
``cache_ttl_seconds``; the default is 0, meaning every request revalidates.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from fnmatch import fnmatchcase

from .httpclient import HttpClient
from .httpserver import JsonHttpService, RawResponse, Request, serve_from_cli

_HOP_HEADERS = {
    "connection",
    "keep-alive",
    "transfer-encoding",
    "host",
    "content-length",
}


@dataclass(frozen=True)
class RouteRule:
    method: str | None
    path: str
    role: str

    def matches(self, method: str, path: str) -> bool:
        if self.method is not None and self.method.upper() != method:
            return False
        return fnmatchcase(path, self.path)


def parse_route_rules(required_role: object) -> list[RouteRule]:
    if isinstance(required_role, str):
        return [RouteRule(method=None, path="*", role=required_role)]
    rules = []
    for entry in required_role:
        rules.append(
            RouteRule(
                method=entry.get("method"),
                path=entry.get("path", "*"),
                role=entry["role"],
            )
        )
    return rules


class EnforcementProxy:
    def __init__(
        self,
        upstream_url: str,
        idm_url: str,
        required_role: object,
        cache_ttl_seconds: float = 0.0,
    ) -> None:
        self._upstream_url = upstream_url
        self._idm_url = idm_url
        self._rules = parse_route_rules(required_role)
        self._cache_ttl = cache_ttl_seconds
        self._cache: dict[str, tuple[float, str, frozenset[str]]] = {}
        self._cache_lock = threading.Lock()
        self._local = threading.local()

    # Connections are per worker thread; HttpClient is not thread-safe.
    def _upstream(self) -> HttpClient:
        client = getattr(self._local, "upstream", None)
        if client is None:
            client = HttpClient(self._upstream_url)
            self._local.upstream = client
        return client

    def _idm(self) -> HttpClient:
        client = getattr(self._local, "idm", None)
        if client is None:
            client = HttpClient(self._idm_url)
            self._local.idm = client
        return client

    def _validate(self, token: str) -> tuple[str, frozenset[str]] | None:
        if self._cache_ttl > 0:
            with self._cache_lock:
                hit = self._cache.get(token)
                if hit is not None and time.monotonic() - hit[0] < self._cache_ttl:
                    return hit[1], hit[2]
        response = self._idm().get(f"/v1/tokens/validate?token={token}")
        if response.status != 200:
            return None
        payload = response.json()
        subject = str(payload["subject"])
        roles = frozenset(payload["roles"])
        if self._cache_ttl > 0:
            with self._cache_lock:
                self._cache[token] = (time.monotonic(), subject, roles)
        return subject, roles

    def _required_role(self, method: str, path: str) -> str | None:
        for rule in self._rules:
            if rule.matches(method, path):
                return rule.role
        return None

    def handle(self, request: Request) -> "tuple[int, object] | RawResponse":
        token = request.headers.get("X-Auth-Token", "")
        identity = self._validate(token) if token else None
        if identity is None:
            return 401, {"error": "invalid-token"}
        subject, roles = identity
        role = self._required_role(request.method, request.path)
        if role is None or role not in roles:
            return 403, {"error": "forbidden"}

        headers = {
            key: value
            for key, value in request.headers.items()
            if key.lower() not in _HOP_HEADERS
        }
        headers["X-Forwarded-Subject"] = subject
        target = request.path + (f"?{request.query_string}" if request.query_string else "")
        upstream = self._upstream().request(
            request.method, target, body=request.body or None, headers=headers
        )
        return RawResponse(
            status=upstream.status,
            body=upstream.body,
            headers={"Content-Type": upstream.headers.get("Content-Type", "application/json")},
        )


def build_service(config: dict) -> JsonHttpService:
    proxy = EnforcementProxy(
        upstream_url=config["upstream_url"],
        idm_url=config["idm_url"],
        required_role=config["required_role"],
        cache_ttl_seconds=float(config.get("cache_ttl_seconds", 0.0)),
    )
    service = JsonHttpService(
        config.get("name", "pep"),
        host=config.get("host", "127.0.0.1"),
        port=int(config.get("port", 0)),
        wire_log_path=config.get("wire_log"),
    )
    service.fallback_handler = proxy.handle
    service.proxy = proxy  # exposed for in-process tests
    return service


def main(argv: list[str] | None = None) -> int:
    return serve_from_cli(build_service, argv)


if __name__ == "__main__":
    raise SystemExit(main())
