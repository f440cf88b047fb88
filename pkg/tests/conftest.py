"""Shared helpers: start services in-process and talk to them over HTTP."""

from __future__ import annotations

import time
from contextlib import contextmanager

import pytest

from trustbus.httpclient import HttpClient
from trustbus.httpserver import JsonHttpService

CREDENTIALS = [
    {"username": "meter-001", "password": "pw-meter-001", "roles": ["producer"]},
    {"username": "meter-002", "password": "pw-meter-002", "roles": ["producer"]},
    {"username": "aggregator-1", "password": "pw-aggregator-1", "roles": ["consumer"]},
    {"username": "hybrid", "password": "pw-hybrid", "roles": ["producer", "consumer"]},
]


@contextmanager
def started(service: JsonHttpService):
    service.start()
    try:
        yield service
    finally:
        service.stop()


@contextmanager
def client_for(service: JsonHttpService):
    client = HttpClient(service.url)
    try:
        yield client
    finally:
        client.close()


def wait_until(predicate, timeout: float = 5.0, interval: float = 0.02) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


class Recorder(JsonHttpService):
    """Upstream stub: records request bodies/headers, answers as told."""

    def __init__(self, status: int = 200, fail_first: int = 0) -> None:
        super().__init__("recorder")
        self.requests: list[dict] = []
        self.status = status
        self.fail_first = fail_first
        self.fallback_handler = self._record

    def _record(self, request):
        self.requests.append(
            {
                "method": request.method,
                "path": request.path,
                "query": request.query_string,
                "headers": dict(request.headers),
                "body": request.body,
            }
        )
        if self.fail_first > 0:
            self.fail_first -= 1
            return 503, {"error": "try-again"}
        return self.status, {"echo": len(self.requests)}


@pytest.fixture
def recorder():
    with started(Recorder()) as service:
        yield service
