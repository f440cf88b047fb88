"""Consumer agent: an attestable service that acquires the region's private
key from the vault, subscribes to the broker, and aggregates decrypted
telemetry into tumbling windows.

Key material lives only inside the EnclaveContext; the surrounding service
hands envelopes in and gets parsed measurements out. Its repr is redacted
so no log line or report can carry key bytes.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import sys
import threading
import time
from collections import Counter
from dataclasses import dataclass
from decimal import Decimal

from ..attestation import Challenge, EnclaveIdentity, ra_respond
from ..envelope import WrappedKey, unwrap_key
from ..errors import (
    AttestationRejected,
    AuthenticationFailed,
    PoisonMessage,
    ProtocolError,
)
from ..httpclient import HttpClient
from ..httpserver import JsonHttpService, Request
from .measurement import Measurement, decrypt_and_parse, parse_payload_obj

log = logging.getLogger(__name__)

DEFAULT_WINDOW_MS = 60_000


class EnclaveContext:
    """Holds the consumer's identity and, once acquired, the private key.

    Decryption happens through this object; the key bytes are never handed
    back out, and repr/str are redacted.
    """

    def __init__(self, identity: EnclaveIdentity) -> None:
        self._identity = identity
        self._pending_shared_key: bytes | None = None
        self._private_part: bytes | None = None
        self.key_id = ""
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"<EnclaveContext measurement={self._identity.measurement.hex()[:16]} key={'set' if self.has_key else 'absent'}>"

    __str__ = __repr__

    @property
    def has_key(self) -> bool:
        return self._private_part is not None

    def respond_to_challenge(self, challenge_obj: object) -> dict:
        """Answer an attestation challenge; remembers the handshake key so a
        wrapped private key arriving next can be opened."""
        challenge = Challenge.from_obj(challenge_obj)
        response, result = ra_respond(self._identity, challenge)
        with self._lock:
            self._pending_shared_key = result.shared_key
        return response.to_obj()

    def install_wrapped_key(self, key_id: str, wrapped_obj: object) -> None:
        with self._lock:
            if self._pending_shared_key is None:
                raise ProtocolError("no attestation handshake preceded the key delivery")
            shared_key = self._pending_shared_key
            self._pending_shared_key = None
        private_part = unwrap_key(shared_key, WrappedKey.from_obj(wrapped_obj))
        with self._lock:
            self._private_part = private_part
            self.key_id = key_id

    def open_envelope(self, envelope_obj: object) -> Measurement:
        with self._lock:
            private_part = self._private_part
        if private_part is None:
            raise PoisonMessage("no private key installed")
        return decrypt_and_parse(private_part, envelope_obj)


@dataclass
class Window:
    region: str
    window_start: int
    window_end: int
    total_wh: Decimal
    contributing: Counter
    duplicates_discarded: int = 0

    def to_obj(self) -> dict:
        return {
            "region": self.region,
            "window_start": self.window_start,
            "window_end": self.window_end,
            "total_wh": str(self.total_wh),
            "contributing": dict(self.contributing),
            "duplicates_discarded": self.duplicates_discarded,
        }


class ConsumerState:
    def __init__(self, consumer_id: str, region: str, mode: str, window_ms: int) -> None:
        self.consumer_id = consumer_id
        self.region = region
        self.mode = mode
        self.window_ms = window_ms
        self.ready = False
        self.acquisition_ms: float | None = None
        self.sub_id = ""
        self.notifications = 0
        self.received = 0
        self.accepted = 0
        self.duplicates = 0
        self.poison = 0
        self.seen: set[tuple[str, int]] = set()
        self.windows: dict[tuple[str, int], Window] = {}
        self.timings: list[list] = []
        self.lock = threading.Lock()

    def ingest(self, measurement: Measurement, consumed_at: float) -> None:
        key = (measurement.producer_id, measurement.seq)
        window_start = int(measurement.produced_at - measurement.produced_at % self.window_ms)
        with self.lock:
            window = self.windows.get((measurement.region, window_start))
            if window is None:
                window = Window(
                    region=measurement.region,
                    window_start=window_start,
                    window_end=window_start + self.window_ms,
                    total_wh=Decimal(0),
                    contributing=Counter(),
                )
                self.windows[(measurement.region, window_start)] = window
            if key in self.seen:
                self.duplicates += 1
                window.duplicates_discarded += 1
                return
            self.seen.add(key)
            self.accepted += 1
            window.total_wh += measurement.consumption_wh
            window.contributing[measurement.producer_id] += 1
            self.timings.append(
                [
                    measurement.producer_id,
                    measurement.seq,
                    measurement.produced_at,
                    consumed_at,
                    consumed_at - measurement.produced_at,
                ]
            )

    def report(self) -> dict:
        with self.lock:
            windows = sorted(
                (w.to_obj() for w in self.windows.values()),
                key=lambda w: (w["region"], w["window_start"]),
            )
            return {
                "consumer_id": self.consumer_id,
                "region": self.region,
                "mode": self.mode,
                "ready": self.ready,
                "sub_id": self.sub_id,
                "acquisition_ms": self.acquisition_ms,
                "counters": {
                    "notifications": self.notifications,
                    "received": self.received,
                    "accepted": self.accepted,
                    "duplicates_discarded": self.duplicates,
                    "poison": self.poison,
                },
                "aggregates": windows,
                "timings": list(self.timings),
            }


def build_service(config: dict) -> JsonHttpService:
    mode = config.get("mode", "secure")
    state = ConsumerState(
        consumer_id=config.get("consumer_id", "consumer"),
        region=config.get("region", ""),
        mode=mode,
        window_ms=int(config.get("window_ms", DEFAULT_WINDOW_MS)),
    )
    context = (
        EnclaveContext(EnclaveIdentity.from_obj(config["identity"]))
        if mode == "secure"
        else None
    )
    service = JsonHttpService(
        config.get("name", "consumer"),
        host=config.get("host", "127.0.0.1"),
        port=int(config.get("port", 0)),
        wire_log_path=config.get("wire_log"),
    )

    def attest(request: Request) -> tuple[int, object]:
        if context is None:
            return 404, {"error": "not-attestable"}
        try:
            return 200, context.respond_to_challenge(request.json())
        except ProtocolError as exc:
            return 400, {"error": str(exc)}

    def notify(request: Request) -> tuple[int, object]:
        body = request.json()
        if not isinstance(body, dict) or not isinstance(body.get("data"), list):
            return 400, {"error": "malformed notification"}
        consumed_at = time.time() * 1000
        with state.lock:
            state.notifications += 1
        for snapshot in body["data"]:
            attrs = snapshot.get("attrs", {}) if isinstance(snapshot, dict) else {}
            for attr in attrs.values():
                value = attr.get("value") if isinstance(attr, dict) else None
                if value is None:
                    continue
                with state.lock:
                    state.received += 1
                try:
                    if context is not None:
                        measurement = context.open_envelope(value)
                    else:
                        measurement = parse_payload_obj(value)
                except PoisonMessage as exc:
                    log.warning("poison message dropped: %s", exc)
                    with state.lock:
                        state.poison += 1
                    continue
                state.ingest(measurement, consumed_at)
        return 200, {"status": "accepted"}

    def stats(request: Request) -> tuple[int, object]:
        with state.lock:
            return 200, {
                "ready": state.ready,
                "notifications": state.notifications,
                "received": state.received,
                "accepted": state.accepted,
                "duplicates_discarded": state.duplicates,
                "poison": state.poison,
            }

    def report(request: Request) -> tuple[int, object]:
        return 200, state.report()

    service.add_route("POST", "/attest", attest)
    service.add_route("POST", "/notify", notify)
    service.add_route("GET", "/stats", stats)
    service.add_route("GET", "/report", report)
    service.state = state  # exposed for in-process tests
    service.context = context
    return service


def setup_consumer(service: JsonHttpService, config: dict) -> None:
    """Acquire the private key (secure mode) and subscribe to the broker.

    Must run after the service is listening: the vault calls back into
    /attest during key acquisition.
    """
    state: ConsumerState = service.state
    mode = config.get("mode", "secure")
    token = ""
    if mode == "secure":
        idm = HttpClient(config["idm_url"])
        try:
            response = idm.post_json(
                "/v1/tokens",
                {"username": config["username"], "password": config["password"]},
            )
        finally:
            idm.close()
        if response.status != 201:
            raise AuthenticationFailed(f"token issuance failed: {response.status}")
        token = response.json()["access_token"]

        started = time.perf_counter()
        vault = HttpClient(config["vault_url"], timeout=30.0)
        try:
            response = vault.post_json(
                f"/v1/keys/{config['region']}/private",
                {"attestation_endpoint": f"{service.url}/attest"},
                headers={"X-Auth-Token": token},
            )
        finally:
            vault.close()
        if response.status == 403:
            raise AttestationRejected("vault rejected this consumer's attestation")
        if response.status != 200:
            raise ProtocolError(f"private key request failed: {response.status}")
        body = response.json()
        service.context.install_wrapped_key(body["key_id"], body["wrapped_key"])
        state.acquisition_ms = (time.perf_counter() - started) * 1000.0

    broker = HttpClient(config["broker_url"])
    try:
        response = broker.post_json(
            "/v2/subscriptions",
            {
                "pattern": config.get("pattern", "meter-*"),
                "attrs": ["consumption"],
                "callback": f"{service.url}/notify",
            },
            headers={"X-Auth-Token": token} if token else {},
        )
    finally:
        broker.close()
    if response.status != 201:
        raise ProtocolError(f"subscription failed: {response.status}")
    with state.lock:
        state.sub_id = response.json()["sub_id"]
        state.ready = True


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 1:
        print("usage: consumer <config.json>", file=sys.stderr)
        return 2
    with open(args[0], "r", encoding="utf-8") as fh:
        config = json.load(fh)
    logging.basicConfig(
        level=getattr(logging, str(config.get("log_level", "INFO")).upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    service = build_service(config)
    service.start()
    signal.signal(signal.SIGTERM, lambda *_: service.stop())
    try:
        setup_consumer(service, config)
    except Exception:
        log.exception("consumer setup failed")
        service.stop()
        return 1
    ready_file = config.get("ready_file")
    if ready_file:
        payload = json.dumps({"port": service.port, "pid": os.getpid()})
        tmp = f"{ready_file}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, ready_file)
    service.wait()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
