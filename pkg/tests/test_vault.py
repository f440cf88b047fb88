"""Key vault: sealing, attested distribution, audit accounting."""

from __future__ import annotations

import base64
import json

import pytest

from trustbus import vault as vault_mod
from trustbus.attestation import (
    EnclaveIdentity,
    HandshakeResponse,
    compute_measurement,
    generate_root_keypair,
    new_challenge,
    ra_respond,
    ra_verify,
)
from trustbus.envelope import WrappedKey, _b64, decrypt, encrypt, unwrap_key
from trustbus.errors import AttestationRejected, AuthenticationFailure
from trustbus.vault import derive_sealing_key, seal, unseal

from conftest import client_for, started

ROOT_PRIVATE, ROOT_PUBLIC = generate_root_keypair()
VAULT_IDENTITY = EnclaveIdentity.provision("key-vault-v1", ROOT_PRIVATE)
CONSUMER_IDENTITY = EnclaveIdentity.provision("consumer-v1", ROOT_PRIVATE)
DEPLOYMENT_SECRET = b"deployment-secret-0001"
AUTH = {"X-Forwarded-Subject": "someone"}

# ---------------------------------------------------------------------------
# sealing


def test_seal_round_trip():
    key = derive_sealing_key(VAULT_IDENTITY.measurement, DEPLOYMENT_SECRET)
    assert unseal(key, seal(key, b"private-bytes")) == b"private-bytes"


def test_unseal_under_different_measurement_fails():
    key = derive_sealing_key(VAULT_IDENTITY.measurement, DEPLOYMENT_SECRET)
    other = derive_sealing_key(compute_measurement("key-vault-v2"), DEPLOYMENT_SECRET)
    sealed = seal(key, b"private-bytes")
    with pytest.raises(AuthenticationFailure):
        unseal(other, sealed)


def test_tampered_sealed_bytes_fail():
    key = derive_sealing_key(VAULT_IDENTITY.measurement, DEPLOYMENT_SECRET)
    sealed = bytearray(seal(key, b"private-bytes"))
    sealed[-1] ^= 1
    with pytest.raises(AuthenticationFailure):
        unseal(key, bytes(sealed))
    with pytest.raises(AuthenticationFailure):
        unseal(key, b"xx")


# ---------------------------------------------------------------------------
# service scaffolding


def make_config(tmp_path=None, **overrides) -> dict:
    config = {
        "identity": VAULT_IDENTITY.to_obj(),
        "avs_root_public": _b64(ROOT_PUBLIC),
        "expected_consumer_measurement": _b64(CONSUMER_IDENTITY.measurement),
        "deployment_secret": _b64(DEPLOYMENT_SECRET),
    }
    if tmp_path is not None:
        config["persist_path"] = str(tmp_path / "vault.jsonl")
    config.update(overrides)
    return config


@pytest.fixture
def service(tmp_path):
    with started(vault_mod.build_service(make_config(tmp_path))) as svc:
        yield svc


class AttestableStub:
    """Stands in for the consumer's /attest endpoint."""

    def __init__(self, identity: EnclaveIdentity):
        self.identity = identity
        self.shared_keys: list[bytes] = []

    def install(self, service) -> str:
        def attest(request):
            from trustbus.attestation import Challenge

            response, result = ra_respond(self.identity, Challenge.from_obj(request.json()))
            self.shared_keys.append(result.shared_key)
            return 200, response.to_obj()

        service.add_route("POST", "/attest", attest)
        return f"{service.url}/attest"


@pytest.fixture
def attest_endpoint(recorder):
    stub = AttestableStub(CONSUMER_IDENTITY)
    url = stub.install(recorder)
    return stub, url


def fetch_public(client, scope: str) -> tuple[str, bytes]:
    challenge, state = new_challenge()
    response = client.post_json(f"/v1/keys/{scope}/public", challenge.to_obj(), headers=AUTH)
    assert response.status == 200
    body = response.json()
    result = ra_verify(
        ROOT_PUBLIC,
        VAULT_IDENTITY.measurement,
        state,
        HandshakeResponse.from_obj(body["handshake"]),
    )
    payload = json.loads(unwrap_key(result.shared_key, WrappedKey.from_obj(body["key"])))
    return payload["key_id"], base64.b64decode(payload["public_part"])


# ---------------------------------------------------------------------------
# public key distribution


def test_public_key_idempotent_per_scope(service):
    with client_for(service) as client:
        key_id_1, public_1 = fetch_public(client, "region-A")
        key_id_2, public_2 = fetch_public(client, "region-A")
    assert key_id_1 == key_id_2
    assert public_1 == public_2


def test_scopes_are_isolated(service):
    with client_for(service) as client:
        key_id_a, public_a = fetch_public(client, "region-A")
        key_id_b, public_b = fetch_public(client, "region-B")
    assert key_id_a != key_id_b
    assert public_a != public_b


def test_wrong_expected_vault_measurement_aborts(service):
    challenge, state = new_challenge()
    with client_for(service) as client:
        body = client.post_json(
            "/v1/keys/region-A/public", challenge.to_obj(), headers=AUTH
        ).json()
    with pytest.raises(AttestationRejected):
        ra_verify(
            ROOT_PUBLIC,
            compute_measurement("evil-vault"),
            state,
            HandshakeResponse.from_obj(body["handshake"]),
        )


def test_unauthenticated_public_request_rejected(service):
    challenge, _ = new_challenge()
    with client_for(service) as client:
        response = client.post_json("/v1/keys/region-A/public", challenge.to_obj())
    assert response.status == 401
    assert service.vault.audit()["counters"]["auth_failed"] == 1


def test_malformed_challenge_rejected(service):
    with client_for(service) as client:
        response = client.post_json("/v1/keys/region-A/public", {"nope": 1}, headers=AUTH)
    assert response.status == 400


# ---------------------------------------------------------------------------
# private key distribution


def test_private_key_round_trips_with_public(service, attest_endpoint):
    stub, url = attest_endpoint
    with client_for(service) as client:
        key_id, public_part = fetch_public(client, "region-A")
        response = client.post_json(
            "/v1/keys/region-A/private", {"attestation_endpoint": url}, headers=AUTH
        )
    assert response.status == 200
    body = response.json()
    assert body["key_id"] == key_id
    private_part = unwrap_key(stub.shared_keys[-1], WrappedKey.from_obj(body["wrapped_key"]))
    # End-to-end oracle: what the public key seals, the private key opens.
    env = encrypt(public_part, b"meter reading", key_id)
    assert decrypt(private_part, env) == b"meter reading"


def test_mismatched_consumer_measurement_rejected(service, recorder):
    imposter = AttestableStub(EnclaveIdentity.provision("evil-consumer", ROOT_PRIVATE))
    url = imposter.install(recorder)
    with client_for(service) as client:
        fetch_public(client, "region-A")
        response = client.post_json(
            "/v1/keys/region-A/private", {"attestation_endpoint": url}, headers=AUTH
        )
    assert response.status == 403
    assert response.json() == {"error": "attestation-failed"}
    audit = service.vault.audit()
    assert audit["counters"]["attestation_failed"] == 1
    assert audit["counters"]["private_key_served"] == 0


def test_unreachable_attestation_endpoint_rejected(service):
    with client_for(service) as client:
        fetch_public(client, "region-A")
        response = client.post_json(
            "/v1/keys/region-A/private",
            {"attestation_endpoint": "http://127.0.0.1:9/attest"},
            headers=AUTH,
        )
    assert response.status == 403


def test_unknown_scope_returns_404(service, attest_endpoint):
    _, url = attest_endpoint
    with client_for(service) as client:
        response = client.post_json(
            "/v1/keys/region-unused/private", {"attestation_endpoint": url}, headers=AUTH
        )
    assert response.status == 404


# ---------------------------------------------------------------------------
# audit and persistence


def test_audit_counts_and_durations(service, attest_endpoint):
    _, url = attest_endpoint
    with client_for(service) as client:
        fetch_public(client, "region-A")
        fetch_public(client, "region-A")
        client.post_json("/v1/keys/region-A/private", {"attestation_endpoint": url}, headers=AUTH)
        audit = client.get("/v1/audit").json()
    assert audit["counters"]["public_key_served"] == 2
    assert audit["counters"]["private_key_served"] == 1
    assert len(audit["attestation_ms"]) == 1
    assert audit["attestation_ms"][0] > 0


def test_audit_route_can_be_disabled(tmp_path):
    with started(vault_mod.build_service(make_config(tmp_path, audit_route=False))) as svc:
        with client_for(svc) as client:
            assert client.get("/v1/audit").status == 404


def test_private_key_never_in_clear(tmp_path, attest_endpoint):
    stub, url = attest_endpoint
    config = make_config(tmp_path)
    service = vault_mod.build_service(config)
    with started(service):
        with client_for(service) as client:
            key_id, public_part = fetch_public(client, "region-A")
            raw = client.post_json(
                "/v1/keys/region-A/private", {"attestation_endpoint": url}, headers=AUTH
            )
            audit_raw = client.get("/v1/audit")
    private_part = unwrap_key(
        stub.shared_keys[-1], WrappedKey.from_obj(raw.json()["wrapped_key"])
    )
    persisted = open(config["persist_path"], "rb").read()
    for blob in (raw.body, audit_raw.body, persisted):
        assert private_part not in blob
        assert _b64(private_part).encode() not in blob
        assert private_part.hex().encode() not in blob


def test_persisted_records_survive_restart(tmp_path, attest_endpoint):
    stub, url = attest_endpoint
    config = make_config(tmp_path)
    first = vault_mod.build_service(config)
    with started(first):
        with client_for(first) as client:
            key_id, public_part = fetch_public(client, "region-A")

    second = vault_mod.build_service(config)
    with started(second):
        with client_for(second) as client:
            key_id_again, public_again = fetch_public(client, "region-A")
            response = client.post_json(
                "/v1/keys/region-A/private", {"attestation_endpoint": url}, headers=AUTH
            )
    assert key_id_again == key_id
    assert public_again == public_part
    private_part = unwrap_key(
        stub.shared_keys[-1], WrappedKey.from_obj(response.json()["wrapped_key"])
    )
    env = encrypt(public_part, b"still works", key_id)
    assert decrypt(private_part, env) == b"still works"
