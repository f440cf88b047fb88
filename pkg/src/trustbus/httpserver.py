"""Threaded JSON-over-HTTP service base used by every component.

Routing is a flat table of (method, path pattern) pairs; patterns may carry
``{param}`` segments. Responses are JSON objects unless a handler returns a
:class:`RawResponse`, which relays arbitrary bytes verbatim (the enforcement
proxy needs that). Keep-alive is on and Nagle's algorithm is off at both
ends; without those, localhost round-trips stall on delayed ACKs and the
latency benchmark measures the kernel instead of the system under test.

A service can append every request line and raw body to a wire-capture
file. The capture is written before any decryption or parsing, so scanning
it for plaintext sentinels checks what actually crossed the socket.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import sys
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlsplit

log = logging.getLogger(__name__)

_WIRE_SEPARATOR = b"\n--- "


@dataclass(frozen=True)
class Request:
    method: str
    path: str
    params: dict[str, str]
    query: dict[str, str]
    headers: dict[str, str]
    body: bytes
    query_string: str = ""

    def json(self) -> object:
        try:
            return json.loads(self.body)
        except (ValueError, UnicodeDecodeError) as exc:
            raise BadRequest(f"body is not valid JSON: {exc}") from exc


@dataclass(frozen=True)
class RawResponse:
    status: int
    body: bytes
    headers: dict[str, str] = field(default_factory=dict)


class BadRequest(Exception):
    """Maps to HTTP 400 with {"error": ...}."""


class _Server(ThreadingHTTPServer):
    # The stdlib default backlog of 5 drops connections when hundreds of
    # producers dial in at once; resets show up client-side as ECONNRESET.
    request_queue_size = 512


Handler = Callable[[Request], "tuple[int, object] | RawResponse"]


def _match(pattern_parts: list[str], path_parts: list[str]) -> dict[str, str] | None:
    if len(pattern_parts) != len(path_parts):
        return None
    params: dict[str, str] = {}
    for pat, got in zip(pattern_parts, path_parts):
        if pat.startswith("{") and pat.endswith("}"):
            if not got:
                return None
            params[pat[1:-1]] = got
        elif pat != got:
            return None
    return params


class JsonHttpService:
    """A small threaded HTTP server with JSON helpers and optional wire capture."""

    def __init__(
        self,
        name: str,
        host: str = "127.0.0.1",
        port: int = 0,
        wire_log_path: str | None = None,
    ) -> None:
        self.name = name
        self._host = host
        self._requested_port = port
        self._routes: list[tuple[str, list[str], Handler]] = []
        self.fallback_handler: Handler | None = None
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        self._stopped = threading.Event()
        self._stop_requested = False
        self._wire_lock = threading.Lock()
        self._wire_file = open(wire_log_path, "ab") if wire_log_path else None
        self.request_count = 0
        self._count_lock = threading.Lock()
        self.add_route("GET", "/health", self._health)
        self.add_route("POST", "/shutdown", self._shutdown_route)

    # -- route table --------------------------------------------------------

    def add_route(self, method: str, pattern: str, handler: Handler) -> None:
        self._routes.append((method.upper(), pattern.strip("/").split("/"), handler))

    def _dispatch(self, request: Request) -> "tuple[int, object] | RawResponse":
        path_parts = request.path.strip("/").split("/")
        seen_path = False
        for method, pattern_parts, handler in self._routes:
            params = _match(pattern_parts, path_parts)
            if params is None:
                continue
            seen_path = True
            if method != request.method:
                continue
            return handler(
                Request(
                    method=request.method,
                    path=request.path,
                    params=params,
                    query=request.query,
                    headers=request.headers,
                    body=request.body,
                    query_string=request.query_string,
                )
            )
        if self.fallback_handler is not None:
            return self.fallback_handler(request)
        if seen_path:
            return 405, {"error": "method-not-allowed"}
        return 404, {"error": "not-found"}

    def _health(self, request: Request) -> tuple[int, object]:
        return 200, {"status": "ok", "service": self.name}

    def _shutdown_route(self, request: Request) -> tuple[int, object]:
        # Arm a deferred stop; the request thread fires it after the response
        # body is on the wire, otherwise process exit can truncate the reply.
        self._stop_requested = True
        return 200, {"status": "stopping"}

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        service = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            disable_nagle_algorithm = True

            def log_message(self, format: str, *args: object) -> None:
                log.debug("%s %s", service.name, format % args)

            def _handle(self) -> None:
                split = urlsplit(self.path)
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                service._capture(self.command, split.path, body)
                with service._count_lock:
                    service.request_count += 1
                request = Request(
                    method=self.command,
                    path=split.path,
                    params={},
                    query={k: v[0] for k, v in parse_qs(split.query).items()},
                    headers={k: v for k, v in self.headers.items()},
                    body=body,
                    query_string=split.query,
                )
                try:
                    result = service._dispatch(request)
                except BadRequest as exc:
                    result = 400, {"error": str(exc)}
                except Exception:
                    log.exception("%s: unhandled error on %s %s", service.name, self.command, split.path)
                    result = 500, {"error": "internal"}
                if isinstance(result, RawResponse):
                    payload = result.body
                    status = result.status
                    headers = dict(result.headers)
                    headers.setdefault("Content-Type", "application/octet-stream")
                else:
                    status, obj = result
                    payload = json.dumps(obj).encode("utf-8")
                    headers = {"Content-Type": "application/json"}
                if status in (204, 304):
                    # No body allowed; a stray payload would desync keep-alive.
                    payload = b""
                self.send_response(status)
                for key, value in headers.items():
                    self.send_header(key, value)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                try:
                    self.wfile.write(payload)
                finally:
                    if service._stop_requested:
                        service._stop_requested = False
                        threading.Thread(target=service.stop, daemon=True).start()

            do_GET = do_POST = do_PUT = do_DELETE = do_PATCH = _handle

        self._server = _Server((self._host, self._requested_port), _Handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            name=f"{self.name}-http",
            daemon=True,
        )
        self._thread.start()
        log.info("%s listening on %s", self.name, self.url)

    def _capture(self, method: str, path: str, body: bytes) -> None:
        if self._wire_file is None:
            return
        with self._wire_lock:
            self._wire_file.write(_WIRE_SEPARATOR + f"{method} {path}\n".encode() + body)
            self._wire_file.flush()

    @property
    def port(self) -> int:
        assert self._server is not None, "service not started"
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self._host}:{self.port}"

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if self._wire_file is not None:
            with self._wire_lock:
                self._wire_file.close()
                self._wire_file = None
        self._stopped.set()

    def wait(self) -> None:
        self._stopped.wait()


# ---------------------------------------------------------------------------
# subprocess runner


def serve_from_cli(build: Callable[[dict], JsonHttpService], argv: list[str] | None = None) -> int:
    """Start a service from ``<config.json>`` and block until shut down.

    The config may name a ``ready_file``; once the port is bound the file is
    written with ``{"port": ..., "pid": ...}`` so a parent process can wait
    for it instead of polling the socket.
    """
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 1:
        print("usage: <module> <config.json>", file=sys.stderr)
        return 2
    with open(args[0], "r", encoding="utf-8") as fh:
        config = json.load(fh)
    logging.basicConfig(
        level=getattr(logging, str(config.get("log_level", "INFO")).upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    service = build(config)
    service.start()
    signal.signal(signal.SIGTERM, lambda *_: service.stop())
    ready_file = config.get("ready_file")
    if ready_file:
        payload = json.dumps({"port": service.port, "pid": os.getpid()})
        tmp = f"{ready_file}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, ready_file)
    service.wait()
    return 0
