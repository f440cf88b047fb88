"""Enforcement proxy: token gate, role gate, verbatim relay, zero leaks."""

from __future__ import annotations

import random

import pytest

from trustbus import idm, pep

from conftest import CREDENTIALS, client_for, started


@pytest.fixture
def stack(recorder):
    with started(idm.build_service({"credentials": CREDENTIALS})) as idm_service:
        proxy = pep.build_service(
            {
                "upstream_url": recorder.url,
                "idm_url": idm_service.url,
                "required_role": "producer",
            }
        )
        with started(proxy):
            yield idm_service, proxy, recorder


def issue(idm_service, username: str) -> str:
    with client_for(idm_service) as client:
        return client.post_json(
            "/v1/tokens", {"username": username, "password": f"pw-{username}"}
        ).json()["access_token"]


def test_valid_token_is_forwarded_with_subject(stack):
    idm_service, proxy, recorder = stack
    token = issue(idm_service, "meter-001")
    with client_for(proxy) as client:
        response = client.post_json(
            "/v2/entities", {"id": "meter-001"}, headers={"X-Auth-Token": token}
        )
    assert response.status == 200
    assert response.json() == {"echo": 1}
    assert len(recorder.requests) == 1
    seen = recorder.requests[0]
    assert seen["headers"]["X-Forwarded-Subject"] == "meter-001"
    assert seen["body"] == b'{"id": "meter-001"}'
    assert seen["path"] == "/v2/entities"


def test_missing_token_never_reaches_upstream(stack):
    idm_service, proxy, recorder = stack
    with client_for(proxy) as client:
        response = client.post_json("/v2/entities", {"id": "x"})
    assert response.status == 401
    assert response.json() == {"error": "invalid-token"}
    assert recorder.requests == []


def test_garbage_token_rejected(stack):
    idm_service, proxy, recorder = stack
    with client_for(proxy) as client:
        response = client.get("/v2/entities/e1", headers={"X-Auth-Token": "bogus"})
    assert response.status == 401
    assert recorder.requests == []


def test_wrong_role_rejected(stack):
    idm_service, proxy, recorder = stack
    token = issue(idm_service, "aggregator-1")  # consumer on a producer-only proxy
    with client_for(proxy) as client:
        response = client.post_json(
            "/v2/entities", {"id": "x"}, headers={"X-Auth-Token": token}
        )
    assert response.status == 403
    assert response.json() == {"error": "forbidden"}
    assert recorder.requests == []


def test_query_string_forwarded(stack):
    idm_service, proxy, recorder = stack
    token = issue(idm_service, "meter-001")
    with client_for(proxy) as client:
        client.get("/v2/entities/e1?attrs=consumption&b=2", headers={"X-Auth-Token": token})
    assert recorder.requests[0]["query"] == "attrs=consumption&b=2"
    assert recorder.requests[0]["path"] == "/v2/entities/e1"


def test_upstream_status_relayed_verbatim(recorder):
    recorder.status = 418
    with started(idm.build_service({"credentials": CREDENTIALS})) as idm_service:
        proxy = pep.build_service(
            {
                "upstream_url": recorder.url,
                "idm_url": idm_service.url,
                "required_role": "producer",
            }
        )
        with started(proxy):
            token = issue(idm_service, "meter-001")
            with client_for(proxy) as client:
                response = client.post_json("/x", {}, headers={"X-Auth-Token": token})
    assert response.status == 418
    assert response.json() == {"echo": 1}


def test_per_route_role_rules(recorder):
    rules = [
        {"method": "POST", "path": "/v1/keys/*/public", "role": "producer"},
        {"method": "POST", "path": "/v1/keys/*/private", "role": "consumer"},
    ]
    with started(idm.build_service({"credentials": CREDENTIALS})) as idm_service:
        proxy = pep.build_service(
            {
                "upstream_url": recorder.url,
                "idm_url": idm_service.url,
                "required_role": rules,
            }
        )
        with started(proxy):
            producer_token = issue(idm_service, "meter-001")
            consumer_token = issue(idm_service, "aggregator-1")
            with client_for(proxy) as client:
                ok = client.post_json(
                    "/v1/keys/region-1/public", {}, headers={"X-Auth-Token": producer_token}
                )
                swapped = client.post_json(
                    "/v1/keys/region-1/private", {}, headers={"X-Auth-Token": producer_token}
                )
                ok2 = client.post_json(
                    "/v1/keys/region-1/private", {}, headers={"X-Auth-Token": consumer_token}
                )
                unmatched = client.post_json(
                    "/v1/audit", {}, headers={"X-Auth-Token": producer_token}
                )
    assert ok.status == 200
    assert swapped.status == 403
    assert ok2.status == 200
    assert unmatched.status == 403  # no rule matches, deny by default
    assert len(recorder.requests) == 2


def test_validation_cache_skips_idm(recorder):
    with started(idm.build_service({"credentials": CREDENTIALS})) as idm_service:
        proxy = pep.build_service(
            {
                "upstream_url": recorder.url,
                "idm_url": idm_service.url,
                "required_role": "producer",
                "cache_ttl_seconds": 60,
            }
        )
        with started(proxy):
            token = issue(idm_service, "meter-001")
            baseline = idm_service.request_count
            with client_for(proxy) as client:
                for _ in range(5):
                    assert client.post_json(
                        "/x", {}, headers={"X-Auth-Token": token}
                    ).status == 200
            validations = idm_service.request_count - baseline
    assert validations == 1
    assert len(recorder.requests) == 5


def test_rejected_requests_never_leak_upstream(stack):
    # Zero-leak enforcement over a pile of randomized junk requests.
    idm_service, proxy, recorder = stack
    rng = random.Random(7)
    with client_for(proxy) as client:
        for _ in range(50):
            kind = rng.choice(["none", "garbage", "wrong-role"])
            if kind == "none":
                headers = {}
            elif kind == "garbage":
                headers = {"X-Auth-Token": rng.randbytes(8).hex()}
            else:
                headers = {"X-Auth-Token": issue(idm_service, "aggregator-1")}
            response = client.post_json("/v2/entities", {"id": "x"}, headers=headers)
            assert response.status in (401, 403)
    assert recorder.requests == []
