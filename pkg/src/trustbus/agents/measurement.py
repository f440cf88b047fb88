"""Telemetry payload format and deterministic consumption generators.

Payloads are compact JSON with one-letter keys; consumption travels as a
decimal string, not a float, so producer-side totals, consumer-side totals,
and any offline recomputation agree to the last digit.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Callable

from ..envelope import EncryptedEnvelope, decrypt
from ..errors import AuthenticationFailure, EncodingError, PoisonMessage

_QUANTUM = Decimal("0.001")


@dataclass(frozen=True)
class Measurement:
    producer_id: str
    region: str
    consumption_wh: Decimal
    seq: int
    produced_at: float  # epoch milliseconds; fractional part kept so
    # single-host latencies below 1 ms stay measurable

    def to_payload_obj(self) -> dict:
        return {
            "p": self.producer_id,
            "r": self.region,
            "c": str(self.consumption_wh),
            "s": self.seq,
            "t": self.produced_at,
        }

    def to_payload(self) -> bytes:
        return json.dumps(self.to_payload_obj(), separators=(",", ":")).encode("utf-8")


def parse_payload_obj(obj: object) -> Measurement:
    if not isinstance(obj, dict):
        raise PoisonMessage("payload is not an object")
    try:
        consumption = Decimal(str(obj["c"]))
        measurement = Measurement(
            producer_id=str(obj["p"]),
            region=str(obj["r"]),
            consumption_wh=consumption,
            seq=int(obj["s"]),
            produced_at=float(obj["t"]),
        )
    except (KeyError, ValueError, TypeError, InvalidOperation) as exc:
        raise PoisonMessage(f"malformed payload: {exc}") from exc
    if not consumption.is_finite() or consumption < 0:
        raise PoisonMessage("consumption must be a finite non-negative decimal")
    if measurement.seq < 1:
        raise PoisonMessage("seq must be positive")
    return measurement


def parse_payload(data: bytes) -> Measurement:
    try:
        obj = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise PoisonMessage(f"payload is not JSON: {exc}") from exc
    return parse_payload_obj(obj)


def decrypt_and_parse(private_part: bytes, envelope_obj: object) -> Measurement:
    """Open an envelope and validate the telemetry inside it.

    Any failure along the way, bad envelope encoding, authentication
    failure, or schema violation, is a poison message to the caller.
    """
    try:
        envelope = EncryptedEnvelope.from_obj(envelope_obj)
        plaintext = decrypt(private_part, envelope)
    except (EncodingError, AuthenticationFailure) as exc:
        raise PoisonMessage(f"envelope rejected: {exc}") from exc
    return parse_payload(plaintext)


# ---------------------------------------------------------------------------
# consumption generators


def make_generator(spec: dict | None, seed: int) -> Callable[[], Decimal]:
    """Build a deterministic consumption source from its config.

    Kinds: ``constant`` (value), ``uniform`` (low/high, 3 decimal places),
    ``trace`` (path to one decimal per line, cycled). The same spec and seed
    always produce the same sequence.
    """
    spec = spec or {"kind": "constant", "value": "100.0"}
    kind = spec.get("kind", "constant")
    if kind == "constant":
        value = Decimal(str(spec.get("value", "100.0")))
        return lambda: value
    if kind == "uniform":
        low = Decimal(str(spec["low"]))
        high = Decimal(str(spec["high"]))
        rng = random.Random(seed)

        def uniform() -> Decimal:
            fraction = Decimal(str(rng.random()))
            return (low + (high - low) * fraction).quantize(_QUANTUM)

        return uniform
    if kind == "trace":
        with open(spec["path"], "r", encoding="utf-8") as fh:
            values = [Decimal(line.strip()) for line in fh if line.strip()]
        if not values:
            raise ValueError("trace file holds no values")
        state = {"index": 0}

        def trace() -> Decimal:
            value = values[state["index"] % len(values)]
            state["index"] += 1
            return value

        return trace
    raise ValueError(f"unknown generator kind: {kind}")
