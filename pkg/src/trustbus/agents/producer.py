"""Producer agent: authenticate, attest the vault, fetch the scope's public
key once, then publish encrypted telemetry to the broker.

In plain mode (the benchmark's no-security baseline) the identity and vault
steps are skipped and the payload goes to the broker as readable JSON.

The module also runs as a process hosting a pool of producers, one thread
each, so the harness can launch hundreds without hundreds of processes.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import threading
import time
from dataclasses import dataclass

from ..attestation import HandshakeResponse, new_challenge, ra_verify
from ..envelope import WrappedKey, encrypt, unwrap_key, _unb64
from ..errors import AttestationRejected, AuthenticationFailed, ProtocolError
from ..httpclient import HttpClient
from .measurement import Measurement, make_generator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProducerConfig:
    producer_id: str
    region: str
    mode: str  # "secure" | "plain"
    broker_url: str
    count: int
    interval_ms: float = 0.0
    idm_url: str = ""
    vault_url: str = ""
    username: str = ""
    password: str = ""
    expected_vault_measurement: str = ""  # base64
    avs_root_public: str = ""  # base64
    generator: dict | None = None
    seed: int = 0

    @classmethod
    def from_obj(cls, obj: dict) -> "ProducerConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


def _issue_token(config: ProducerConfig) -> str:
    client = HttpClient(config.idm_url)
    try:
        response = client.post_json(
            "/v1/tokens", {"username": config.username, "password": config.password}
        )
    finally:
        client.close()
    if response.status != 201:
        raise AuthenticationFailed(f"token issuance failed: {response.status}")
    return response.json()["access_token"]


def _fetch_public_key(config: ProducerConfig, token: str) -> tuple[str, bytes, float]:
    """Attest the vault and fetch the region's public key over the attested
    channel. Returns (key_id, public_part, handshake duration ms)."""
    started = time.perf_counter()
    challenge, state = new_challenge()
    client = HttpClient(config.vault_url)
    try:
        response = client.post_json(
            f"/v1/keys/{config.region}/public",
            challenge.to_obj(),
            headers={"X-Auth-Token": token},
        )
    finally:
        client.close()
    if response.status != 200:
        raise ProtocolError(f"public key request failed: {response.status}")
    body = response.json()
    result = ra_verify(
        _unb64(config.avs_root_public),
        _unb64(config.expected_vault_measurement),
        state,
        HandshakeResponse.from_obj(body["handshake"]),
    )
    payload = json.loads(unwrap_key(result.shared_key, WrappedKey.from_obj(body["key"])))
    duration_ms = (time.perf_counter() - started) * 1000.0
    return payload["key_id"], _unb64(payload["public_part"]), duration_ms


class Producer:
    """The producer flow split in two: acquire credentials and key material,
    then publish. The split lets an orchestrator bring every producer's key
    into existence before consumers ask the vault for the private side."""

    def __init__(self, config: ProducerConfig) -> None:
        self.config = config
        self._token = ""
        self._key_id = ""
        self._public_part = b""
        self.attestation_ms: float | None = None

    def acquire(self) -> None:
        """Token plus attested public key; no-op in plain mode.

        Raises AuthenticationFailed or AttestationRejected before any broker
        traffic if the setup steps fail.
        """
        if self.config.mode != "secure":
            return
        self._token = _issue_token(self.config)
        self._key_id, self._public_part, self.attestation_ms = _fetch_public_key(
            self.config, self._token
        )

    def publish(self) -> dict:
        config = self.config
        generate = make_generator(config.generator, config.seed)
        broker = HttpClient(config.broker_url)
        headers = {"X-Auth-Token": self._token} if self._token else {}
        published = 0
        errors = 0
        values: list[str] = []
        cycles: list[dict] = []
        interval = config.interval_ms / 1000.0
        start = time.monotonic()
        try:
            for seq in range(1, config.count + 1):
                if interval > 0:
                    target = start + (seq - 1) * interval
                    delay = target - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                produced_at = time.time() * 1000
                measurement = Measurement(
                    producer_id=config.producer_id,
                    region=config.region,
                    consumption_wh=generate(),
                    seq=seq,
                    produced_at=produced_at,
                )
                if config.mode == "secure":
                    value = encrypt(
                        self._public_part, measurement.to_payload(), self._key_id
                    ).to_obj()
                else:
                    value = measurement.to_payload_obj()
                body = {
                    "id": config.producer_id,
                    "type": "SmartMeter",
                    "attrs": {"consumption": {"value": value, "timestamp": int(produced_at)}},
                }
                response = broker.post_json("/v2/entities", body, headers=headers)
                if response.status in (401, 403):
                    errors += 1
                    response = broker.post_json("/v2/entities", body, headers=headers)
                if response.status in (201, 204):
                    published += 1
                    values.append(str(measurement.consumption_wh))
                    cycles.append({"seq": seq, "produced_at": produced_at})
                else:
                    errors += 1
        finally:
            broker.close()
        return {
            "producer_id": config.producer_id,
            "region": config.region,
            "mode": config.mode,
            "key_id": self._key_id,
            "published": published,
            "errors": errors,
            "attestation_ms": self.attestation_ms,
            "values": values,
            "cycles": cycles,
        }


def producer_run(config: ProducerConfig) -> dict:
    """Acquire then publish in one go; returns the run summary."""
    producer = Producer(config)
    producer.acquire()
    return producer.publish()


# ---------------------------------------------------------------------------
# producer pool process


def _aborted_summary(config: ProducerConfig, reason: str) -> dict:
    return {
        "producer_id": config.producer_id,
        "region": config.region,
        "mode": config.mode,
        "key_id": "",
        "published": 0,
        "errors": 1,
        "attestation_ms": None,
        "values": [],
        "cycles": [],
        "aborted": reason,
    }


def run_pool(config: dict) -> dict:
    """Run many producers, one thread each, in two phases.

    All producers acquire first; once done, ``acquired_file`` is written so
    an orchestrator can bring up consumers, and publishing waits until
    ``start_barrier_file`` appears. Without those keys the phases simply run
    back to back.
    """
    defaults = config.get("defaults", {})
    producers = [
        Producer(ProducerConfig.from_obj({**defaults, **entry}))
        for entry in config["producers"]
    ]
    results: list[dict | None] = [None] * len(producers)

    def run_phase(action) -> None:
        threads = [
            threading.Thread(target=action, args=(index,), name=f"producer-{index}")
            for index in range(len(producers))
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

    def acquire(index: int) -> None:
        producer = producers[index]
        try:
            producer.acquire()
        except (AuthenticationFailed, AttestationRejected, ProtocolError, OSError) as exc:
            log.error("producer %s aborted in setup: %s", producer.config.producer_id, exc)
            results[index] = _aborted_summary(producer.config, str(exc))

    def publish(index: int) -> None:
        if results[index] is not None:  # aborted during acquire
            return
        producer = producers[index]
        try:
            results[index] = producer.publish()
        except OSError as exc:
            log.error("producer %s failed publishing: %s", producer.config.producer_id, exc)
            results[index] = _aborted_summary(producer.config, str(exc))

    started_at = int(time.time() * 1000)
    run_phase(acquire)

    acquired_file = config.get("acquired_file")
    if acquired_file:
        ready = sum(1 for r in results if r is None)
        tmp = f"{acquired_file}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"acquired": ready, "total": len(producers)}, fh)
        os.replace(tmp, acquired_file)

    barrier = config.get("start_barrier_file")
    if barrier:
        deadline = time.monotonic() + float(config.get("barrier_timeout_s", 120))
        while not os.path.exists(barrier):
            if time.monotonic() > deadline:
                for index, producer in enumerate(producers):
                    if results[index] is None:
                        results[index] = _aborted_summary(
                            producer.config, "start barrier never appeared"
                        )
                break
            time.sleep(0.01)

    run_phase(publish)
    return {
        "started_at": started_at,
        "finished_at": int(time.time() * 1000),
        "producers": results,
    }


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 1:
        print("usage: producer <config.json>", file=sys.stderr)
        return 2
    with open(args[0], "r", encoding="utf-8") as fh:
        config = json.load(fh)
    logging.basicConfig(
        level=getattr(logging, str(config.get("log_level", "INFO")).upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    report = run_pool(config)
    out_file = config.get("out_file")
    if out_file:
        tmp = f"{out_file}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(report, fh)
        os.replace(tmp, out_file)
    else:
        json.dump(report, sys.stdout)
    aborted = sum(1 for r in report["producers"] if r and r.get("aborted"))
    return 1 if aborted else 0


if __name__ == "__main__":
    raise SystemExit(main())
