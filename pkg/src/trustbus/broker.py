"""Publish/subscribe context store: entities, glob subscriptions, notifications.

The broker is deliberately untrusted: attribute values are opaque JSON
stored and forwarded verbatim, and nothing in this module imports key
material or crypto. Each subscription gets its own queue and dispatch
worker so one dead subscriber cannot stall the rest; delivery is
at-least-once with a per-subscription sequence number, one attempt plus
three retries 100 ms apart, then the notification is dropped and counted.

Entity ids match subscription patterns under a glob language of ``*`` (any
run of characters) and ``?`` (exactly one); matching is anchored at both
ends. The matcher is written out here rather than borrowed so its behavior
is pinned by tests against a reference implementation.
"""

from __future__ import annotations

import json
import queue
import re
import threading
import time
import uuid
from dataclasses import dataclass, field

from .httpclient import HttpClient
from .httpserver import JsonHttpService, Request, serve_from_cli
from urllib.parse import urlsplit

RETRY_LIMIT = 3
RETRY_BACKOFF_SECONDS = 0.1
_QUEUE_STOP = object()


def glob_to_regex(pattern: str) -> "re.Pattern[str]":
    pieces = ["^"]
    for char in pattern:
        if char == "*":
            pieces.append(".*")
        elif char == "?":
            pieces.append(".")
        else:
            pieces.append(re.escape(char))
    pieces.append("$")
    return re.compile("".join(pieces), flags=re.DOTALL)


def glob_match(pattern: str, name: str) -> bool:
    return glob_to_regex(pattern).match(name) is not None


@dataclass
class Subscription:
    sub_id: str
    pattern: str
    attribute_filter: frozenset[str] | None
    callback_url: str
    regex: "re.Pattern[str]"
    seq: int = 0
    enqueued: int = 0
    delivered: int = 0
    dropped: int = 0
    retries: int = 0
    queue: "queue.SimpleQueue" = field(default_factory=queue.SimpleQueue)
    lock: threading.Lock = field(default_factory=threading.Lock)


class ContextBroker:
    def __init__(self, persist_path: str | None = None) -> None:
        self._entities: dict[str, dict] = {}
        self._entity_locks: dict[str, threading.Lock] = {}
        self._map_lock = threading.Lock()
        self._subscriptions: dict[str, Subscription] = {}
        self._subs_lock = threading.Lock()
        self._workers: list[threading.Thread] = []
        self._persist_path = persist_path
        self._persist_lock = threading.Lock()
        self._persist_file = None
        if persist_path:
            self._replay(persist_path)
            self._persist_file = open(persist_path, "a", encoding="utf-8")

    # -- persistence ---------------------------------------------------------

    def _replay(self, path: str) -> None:
        try:
            fh = open(path, "r", encoding="utf-8")
        except FileNotFoundError:
            return
        with fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if record["kind"] == "entity":
                    self._merge_entity(record["id"], record["type"], record["attrs"])
                elif record["kind"] == "subscription":
                    self._register(
                        record["sub_id"],
                        record["pattern"],
                        record.get("attrs"),
                        record["callback"],
                    )

    def _append_log(self, record: dict) -> None:
        if self._persist_file is None:
            return
        with self._persist_lock:
            self._persist_file.write(json.dumps(record) + "\n")
            self._persist_file.flush()

    # -- entities ------------------------------------------------------------

    def _entity_lock(self, entity_id: str) -> threading.Lock:
        with self._map_lock:
            lock = self._entity_locks.get(entity_id)
            if lock is None:
                lock = threading.Lock()
                self._entity_locks[entity_id] = lock
            return lock

    def _merge_entity(self, entity_id: str, entity_type: str, attrs: dict) -> bool:
        created = entity_id not in self._entities
        if created:
            self._entities[entity_id] = {"id": entity_id, "type": entity_type, "attrs": {}}
        self._entities[entity_id]["attrs"].update(attrs)
        return created

    def upsert_entity(self, entity_id: str, entity_type: str, attrs: dict) -> bool:
        """Merge attributes, notify matching subscriptions; True if created."""
        now_ms = int(time.time() * 1000)
        normalized = {}
        for name, attr in attrs.items():
            if not isinstance(attr, dict) or "value" not in attr:
                raise ValueError(f"attribute {name!r} must be {{value, timestamp?}}")
            normalized[name] = {
                "value": attr["value"],
                "timestamp": int(attr.get("timestamp", now_ms)),
            }
        with self._entity_lock(entity_id):
            created = self._merge_entity(entity_id, entity_type, normalized)
        self._append_log(
            {"kind": "entity", "id": entity_id, "type": entity_type, "attrs": normalized}
        )
        self._fan_out(entity_id, entity_type, normalized)
        return created

    def query_entity(self, entity_id: str) -> dict | None:
        with self._entity_lock(entity_id):
            entity = self._entities.get(entity_id)
            return json.loads(json.dumps(entity)) if entity else None

    # -- subscriptions -------------------------------------------------------

    def _register(
        self, sub_id: str, pattern: str, attribute_filter: list[str] | None, callback: str
    ) -> Subscription:
        sub = Subscription(
            sub_id=sub_id,
            pattern=pattern,
            attribute_filter=frozenset(attribute_filter) if attribute_filter else None,
            callback_url=callback,
            regex=glob_to_regex(pattern),
        )
        with self._subs_lock:
            self._subscriptions[sub_id] = sub
        worker = threading.Thread(
            target=self._dispatch_loop, args=(sub,), name=f"dispatch-{sub_id}", daemon=True
        )
        self._workers.append(worker)
        worker.start()
        return sub

    def create_subscription(
        self, pattern: str, attribute_filter: list[str] | None, callback_url: str
    ) -> str:
        split = urlsplit(callback_url)
        if split.scheme != "http" or not split.hostname:
            raise ValueError(f"callback must be an http URL: {callback_url}")
        sub_id = uuid.uuid4().hex[:16]
        self._register(sub_id, pattern, attribute_filter, callback_url)
        self._append_log(
            {
                "kind": "subscription",
                "sub_id": sub_id,
                "pattern": pattern,
                "attrs": list(attribute_filter) if attribute_filter else None,
                "callback": callback_url,
            }
        )
        return sub_id

    # -- notification dispatch ------------------------------------------------

    def _fan_out(self, entity_id: str, entity_type: str, changed_attrs: dict) -> None:
        with self._subs_lock:
            subscriptions = list(self._subscriptions.values())
        for sub in subscriptions:
            if sub.regex.match(entity_id) is None:
                continue
            if sub.attribute_filter is not None:
                selected = {k: v for k, v in changed_attrs.items() if k in sub.attribute_filter}
                if not selected:
                    continue
            else:
                selected = changed_attrs
            snapshot = {"id": entity_id, "type": entity_type, "attrs": selected}
            with sub.lock:
                sub.seq += 1
                sub.enqueued += 1
                sub.queue.put((sub.seq, snapshot))

    def _dispatch_loop(self, sub: Subscription) -> None:
        client: HttpClient | None = None
        split = urlsplit(sub.callback_url)
        base = f"http://{split.hostname}:{split.port or 80}"
        path = split.path or "/"
        while True:
            item = sub.queue.get()
            if item is _QUEUE_STOP:
                if client is not None:
                    client.close()
                return
            seq, snapshot = item
            body = {"subscriptionId": sub.sub_id, "seq": seq, "data": [snapshot]}
            delivered = False
            for attempt in range(1 + RETRY_LIMIT):
                if attempt:
                    with sub.lock:
                        sub.retries += 1
                    time.sleep(RETRY_BACKOFF_SECONDS)
                try:
                    if client is None:
                        client = HttpClient(base)
                    response = client.post_json(path, body)
                    if 200 <= response.status < 300:
                        delivered = True
                        break
                except OSError:
                    if client is not None:
                        client.close()
                    client = None
            with sub.lock:
                if delivered:
                    sub.delivered += 1
                else:
                    sub.dropped += 1

    # -- introspection ---------------------------------------------------------

    def stats(self) -> dict:
        with self._subs_lock:
            subscriptions = list(self._subscriptions.values())
        per_sub = {}
        totals = {"enqueued": 0, "delivered": 0, "dropped": 0, "retries": 0}
        for sub in subscriptions:
            with sub.lock:
                entry = {
                    "pattern": sub.pattern,
                    "enqueued": sub.enqueued,
                    "delivered": sub.delivered,
                    "dropped": sub.dropped,
                    "retries": sub.retries,
                }
            per_sub[sub.sub_id] = entry
            for key in totals:
                totals[key] += entry[key]
        with self._map_lock:
            entity_count = len(self._entities)
        return {
            "entities": entity_count,
            "subscriptions": len(subscriptions),
            "notifications": totals,
            "per_subscription": per_sub,
        }

    def drain(self, timeout: float = 10.0) -> bool:
        """Wait until every queued notification is delivered or dropped."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            totals = self.stats()["notifications"]
            if totals["delivered"] + totals["dropped"] >= totals["enqueued"]:
                return True
            time.sleep(0.02)
        return False

    def close(self) -> None:
        with self._subs_lock:
            subscriptions = list(self._subscriptions.values())
        for sub in subscriptions:
            sub.queue.put(_QUEUE_STOP)
        if self._persist_file is not None:
            with self._persist_lock:
                self._persist_file.close()
                self._persist_file = None


# ---------------------------------------------------------------------------
# HTTP service


def build_service(config: dict) -> JsonHttpService:
    broker = ContextBroker(persist_path=config.get("persist_path"))
    service = JsonHttpService(
        "broker",
        host=config.get("host", "127.0.0.1"),
        port=int(config.get("port", 0)),
        wire_log_path=config.get("wire_log"),
    )

    def upsert(request: Request) -> tuple[int, object]:
        body = request.json()
        if not isinstance(body, dict) or "id" not in body or "attrs" not in body:
            return 400, {"error": "entity id and attrs required"}
        try:
            created = broker.upsert_entity(
                str(body["id"]), str(body.get("type", "Entity")), body["attrs"]
            )
        except ValueError as exc:
            return 400, {"error": str(exc)}
        return (201, {"status": "created"}) if created else (204, {})

    def query(request: Request) -> tuple[int, object]:
        entity = broker.query_entity(request.params["id"])
        if entity is None:
            return 404, {"error": "not-found"}
        return 200, entity

    def subscribe(request: Request) -> tuple[int, object]:
        body = request.json()
        if not isinstance(body, dict) or "pattern" not in body or "callback" not in body:
            return 400, {"error": "pattern and callback required"}
        try:
            sub_id = broker.create_subscription(
                str(body["pattern"]), body.get("attrs"), str(body["callback"])
            )
        except ValueError as exc:
            return 400, {"error": str(exc)}
        return 201, {"sub_id": sub_id}

    def stats(request: Request) -> tuple[int, object]:
        return 200, broker.stats()

    service.add_route("POST", "/v2/entities", upsert)
    service.add_route("GET", "/v2/entities/{id}", query)
    service.add_route("POST", "/v2/subscriptions", subscribe)
    service.add_route("GET", "/v2/stats", stats)
    service.broker = broker  # exposed for in-process tests

    original_stop = service.stop

    def stop() -> None:
        broker.close()
        original_stop()

    service.stop = stop
    return service


def main(argv: list[str] | None = None) -> int:
    return serve_from_cli(build_service, argv)


if __name__ == "__main__":
    raise SystemExit(main())
