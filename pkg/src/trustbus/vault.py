"""Key vault: generates scoped key pairs, seals them at rest, hands them out.

Distribution rules follow the deployment's trust story. A producer asking
for a public key first attests the vault (the vault answers the producer's
challenge), and the key travels encrypted under the resulting handshake
key so nothing on the path can substitute it. A consumer asking for a
private key is attested by the vault (the vault challenges the consumer's
attestation endpoint); only on success is the private part unsealed,
wrapped under the handshake key, and returned. Raw private key bytes never
appear in any response body or in the persisted record file.

Sealing binds stored keys to the vault's own measurement plus a deployment
secret, so a vault with different code identity cannot recover them.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from urllib.parse import urlsplit

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .attestation import (
    Challenge,
    EnclaveIdentity,
    HandshakeResponse,
    new_challenge,
    ra_respond,
    ra_verify,
)
from .envelope import (
    NONCE_LEN,
    _b64,
    _unb64,
    generate_keypair,
    wrap_key,
)
from .errors import (
    AttestationRejected,
    AuthenticationFailure,
    EncodingError,
    ProtocolError,
)
from .httpclient import HttpClient
from .httpserver import JsonHttpService, Request, serve_from_cli

_SEAL_INFO = b"trustbus/seal/v1"
_SEAL_AAD = b"trustbus/sealed-record/v1"


def derive_sealing_key(measurement: bytes, deployment_secret: bytes) -> bytes:
    return hashlib.sha256(_SEAL_INFO + measurement + deployment_secret).digest()


def seal(sealing_key: bytes, private_part: bytes) -> bytes:
    nonce = os.urandom(NONCE_LEN)
    return nonce + AESGCM(sealing_key).encrypt(nonce, private_part, _SEAL_AAD)


def unseal(sealing_key: bytes, sealed: bytes) -> bytes:
    if len(sealed) < NONCE_LEN + 16:
        raise AuthenticationFailure("sealed record too short")
    try:
        return AESGCM(sealing_key).decrypt(sealed[:NONCE_LEN], sealed[NONCE_LEN:], _SEAL_AAD)
    except InvalidTag:
        raise AuthenticationFailure("sealed record does not authenticate") from None


@dataclass(frozen=True)
class KeyRecord:
    key_id: str
    scope: str
    public_part: bytes
    sealed_private: bytes

    def to_obj(self) -> dict:
        return {
            "key_id": self.key_id,
            "scope": self.scope,
            "public_part": _b64(self.public_part),
            "sealed_private": _b64(self.sealed_private),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "KeyRecord":
        return cls(
            key_id=obj["key_id"],
            scope=obj["scope"],
            public_part=_unb64(obj["public_part"]),
            sealed_private=_unb64(obj["sealed_private"]),
        )


class KeyVault:
    def __init__(
        self,
        identity: EnclaveIdentity,
        avs_root_public: bytes,
        expected_consumer_measurement: bytes,
        deployment_secret: bytes,
        persist_path: str | None = None,
    ) -> None:
        self.identity = identity
        self._avs_root_public = avs_root_public
        self._expected_consumer = expected_consumer_measurement
        self._sealing_key = derive_sealing_key(identity.measurement, deployment_secret)
        self._records: dict[str, KeyRecord] = {}
        self._records_lock = threading.Lock()
        self._persist_path = persist_path
        self._persist_lock = threading.Lock()
        self.counters = {
            "public_key_served": 0,
            "private_key_served": 0,
            "attestation_failed": 0,
            "auth_failed": 0,
        }
        self.attestation_ms: list[float] = []
        self._audit_lock = threading.Lock()
        if persist_path:
            self._replay(persist_path)

    # -- persistence ---------------------------------------------------------

    def _replay(self, path: str) -> None:
        try:
            fh = open(path, "r", encoding="utf-8")
        except FileNotFoundError:
            return
        with fh:
            for line in fh:
                line = line.strip()
                if line:
                    record = KeyRecord.from_obj(json.loads(line))
                    self._records[record.scope] = record

    def _persist(self, record: KeyRecord) -> None:
        if not self._persist_path:
            return
        with self._persist_lock:
            with open(self._persist_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_obj()) + "\n")

    # -- audit -----------------------------------------------------------------

    def _count(self, name: str) -> None:
        with self._audit_lock:
            self.counters[name] += 1

    def audit(self) -> dict:
        with self._audit_lock:
            return {
                "counters": dict(self.counters),
                "attestation_ms": list(self.attestation_ms),
            }

    # -- key records -----------------------------------------------------------

    def _record_for(self, scope: str) -> KeyRecord:
        # Creation is serialized so exactly one pair wins per scope.
        with self._records_lock:
            record = self._records.get(scope)
            if record is None:
                pair = generate_keypair(scope)
                record = KeyRecord(
                    key_id=pair.key_id,
                    scope=scope,
                    public_part=pair.public_part,
                    sealed_private=seal(self._sealing_key, pair.private_part),
                )
                self._records[scope] = record
                self._persist(record)
            return record

    # -- distribution ------------------------------------------------------------

    def serve_public_key(self, scope: str, challenge: Challenge) -> dict:
        """Attest to the caller and return the scope's public key, encrypted
        under the handshake key. Creates the pair on first request."""
        record = self._record_for(scope)
        response, result = ra_respond(self.identity, challenge)
        payload = json.dumps(
            {"key_id": record.key_id, "public_part": _b64(record.public_part)}
        ).encode("utf-8")
        sealed_payload = wrap_key(result.shared_key, payload)
        self._count("public_key_served")
        return {"handshake": response.to_obj(), "key": sealed_payload.to_obj()}

    def serve_private_key(self, scope: str, attestation_endpoint: str) -> tuple[int, dict]:
        """Attest the consumer at ``attestation_endpoint``; on success return
        the scope's private key wrapped under the handshake key."""
        with self._records_lock:
            record = self._records.get(scope)
        if record is None:
            return 404, {"error": "unknown-scope"}
        started = time.perf_counter()
        try:
            shared_key = self._attest_consumer(attestation_endpoint)
        except (AttestationRejected, ProtocolError, EncodingError, OSError):
            self._count("attestation_failed")
            return 403, {"error": "attestation-failed"}
        duration_ms = (time.perf_counter() - started) * 1000.0
        with self._audit_lock:
            self.attestation_ms.append(duration_ms)
        private_part = unseal(self._sealing_key, record.sealed_private)
        wrapped = wrap_key(shared_key, private_part)
        self._count("private_key_served")
        return 200, {"key_id": record.key_id, "wrapped_key": wrapped.to_obj()}

    def _attest_consumer(self, endpoint: str) -> bytes:
        challenge, state = new_challenge()
        split = urlsplit(endpoint)
        client = HttpClient(f"http://{split.hostname}:{split.port or 80}")
        try:
            response = client.post_json(split.path or "/", challenge.to_obj())
        finally:
            client.close()
        if response.status != 200:
            raise ProtocolError(f"attestation endpoint answered {response.status}")
        handshake = HandshakeResponse.from_obj(response.json())
        result = ra_verify(self._avs_root_public, self._expected_consumer, state, handshake)
        return result.shared_key


# ---------------------------------------------------------------------------
# HTTP service


def build_service(config: dict) -> JsonHttpService:
    vault = KeyVault(
        identity=EnclaveIdentity.from_obj(config["identity"]),
        avs_root_public=_unb64(config["avs_root_public"]),
        expected_consumer_measurement=_unb64(config["expected_consumer_measurement"]),
        deployment_secret=_unb64(config["deployment_secret"]),
        persist_path=config.get("persist_path"),
    )
    audit_route = bool(config.get("audit_route", True))
    service = JsonHttpService(
        "vault",
        host=config.get("host", "127.0.0.1"),
        port=int(config.get("port", 0)),
        wire_log_path=config.get("wire_log"),
    )

    def authenticated(request: Request) -> bool:
        # The fronting proxy sets this after token validation; its absence
        # means the proxy was bypassed.
        return bool(request.headers.get("X-Forwarded-Subject"))

    def public_key(request: Request) -> tuple[int, object]:
        if not authenticated(request):
            vault._count("auth_failed")
            return 401, {"error": "unauthenticated"}
        try:
            challenge = Challenge.from_obj(request.json())
        except ProtocolError as exc:
            return 400, {"error": str(exc)}
        return 200, vault.serve_public_key(request.params["scope"], challenge)

    def private_key(request: Request) -> tuple[int, object]:
        if not authenticated(request):
            vault._count("auth_failed")
            return 401, {"error": "unauthenticated"}
        body = request.json()
        if not isinstance(body, dict) or "attestation_endpoint" not in body:
            return 400, {"error": "attestation_endpoint required"}
        return vault.serve_private_key(
            request.params["scope"], str(body["attestation_endpoint"])
        )

    def audit(request: Request) -> tuple[int, object]:
        if not audit_route:
            return 404, {"error": "not-found"}
        return 200, vault.audit()

    service.add_route("POST", "/v1/keys/{scope}/public", public_key)
    service.add_route("POST", "/v1/keys/{scope}/private", private_key)
    service.add_route("GET", "/v1/audit", audit)
    service.vault = vault  # exposed for in-process tests
    return service


def main(argv: list[str] | None = None) -> int:
    return serve_from_cli(build_service, argv)


if __name__ == "__main__":
    raise SystemExit(main())
