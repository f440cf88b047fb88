"""Keep-alive HTTP client used by agents, proxies, and the harness.

One connection per client instance, reused across requests; TCP_NODELAY is
set on connect (see httpserver for why). A request that fails because the
server closed an idle keep-alive connection is retried once on a fresh
connection; anything else propagates.
"""

from __future__ import annotations

import http.client
import json
import socket
from dataclasses import dataclass
from urllib.parse import urlsplit


@dataclass(frozen=True)
class HttpResponse:
    status: int
    headers: dict[str, str]
    body: bytes

    def json(self) -> object:
        return json.loads(self.body) if self.body else None


class _NoDelayConnection(http.client.HTTPConnection):
    def connect(self) -> None:
        super().connect()
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


_RETRYABLE = (
    http.client.BadStatusLine,
    http.client.CannotSendRequest,
    http.client.ResponseNotReady,
    ConnectionResetError,
    BrokenPipeError,
)


class HttpClient:
    """Persistent connection to one base URL. Not thread-safe; one per thread."""

    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        split = urlsplit(base_url)
        if split.scheme != "http" or not split.hostname:
            raise ValueError(f"unsupported base url: {base_url}")
        self._host = split.hostname
        self._port = split.port or 80
        self._timeout = timeout
        self._conn: _NoDelayConnection | None = None

    def _connection(self) -> _NoDelayConnection:
        if self._conn is None:
            self._conn = _NoDelayConnection(self._host, self._port, timeout=self._timeout)
        return self._conn

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def request(
        self,
        method: str,
        path: str,
        body: bytes | None = None,
        headers: dict[str, str] | None = None,
    ) -> HttpResponse:
        for attempt in (0, 1):
            conn = self._connection()
            try:
                conn.request(method, path, body=body, headers=headers or {})
                response = conn.getresponse()
                payload = response.read()
                return HttpResponse(
                    status=response.status,
                    headers={k: v for k, v in response.getheaders()},
                    body=payload,
                )
            except _RETRYABLE:
                self.close()
                if attempt:
                    raise
        raise AssertionError("unreachable")

    def get(self, path: str, headers: dict[str, str] | None = None) -> HttpResponse:
        return self.request("GET", path, headers=headers)

    def post_json(
        self, path: str, obj: object, headers: dict[str, str] | None = None
    ) -> HttpResponse:
        merged = {"Content-Type": "application/json"}
        merged.update(headers or {})
        return self.request("POST", path, body=json.dumps(obj).encode("utf-8"), headers=merged)


def fetch_json(url: str, timeout: float = 10.0) -> object:
    """One-shot GET for places that do not keep a connection around."""
    split = urlsplit(url)
    client = HttpClient(f"http://{split.hostname}:{split.port or 80}", timeout=timeout)
    try:
        response = client.get(split.path + (f"?{split.query}" if split.query else ""))
        if response.status != 200:
            raise RuntimeError(f"GET {url} -> {response.status}")
        return response.json()
    finally:
        client.close()
