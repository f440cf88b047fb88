"""Envelope crypto: round-trip identity, tamper evidence, key wrapping."""

from __future__ import annotations

import base64
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustbus import envelope
from trustbus.envelope import (
    EncryptedEnvelope,
    NONCE_LEN,
    PAYLOAD_LIMIT,
    WrappedKey,
    decrypt,
    encrypt,
    generate_keypair,
    unwrap_key,
    wrap_key,
)
from trustbus.errors import AuthenticationFailure, EncodingError

# ---------------------------------------------------------------------------
# independent oracles


def longest_common_substring(a: bytes, b: bytes) -> int:
    # Plain dynamic programming, deliberately independent of the package.
    best = 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
                if cur[j] > best:
                    best = cur[j]
        prev = cur
    return best


def flip_bit(data: bytes, bit: int) -> bytes:
    out = bytearray(data)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


# ---------------------------------------------------------------------------
# round-trip identity


def test_round_trip_empty():
    pair = generate_keypair("region-1")
    env = encrypt(pair.public_part, b"", key_id=pair.key_id)
    assert decrypt(pair.private_part, env) == b""


def test_round_trip_fixed_value():
    pair = generate_keypair("region-1")
    env = encrypt(pair.public_part, b"42.7", key_id=pair.key_id)
    assert decrypt(pair.private_part, env) == b"42.7"


def test_round_trip_random_lengths():
    # 1000 random plaintexts of lengths 1..4096; oracle is the identity.
    rng = random.Random(0xE44)
    pair = generate_keypair("region-1")
    for _ in range(1000):
        plaintext = rng.randbytes(rng.randint(1, 4096))
        env = encrypt(pair.public_part, plaintext, key_id=pair.key_id)
        assert decrypt(pair.private_part, env) == plaintext


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=4096))
def test_round_trip_property(plaintext):
    pair = generate_keypair("region-1")
    env = encrypt(pair.public_part, plaintext, key_id=pair.key_id)
    assert decrypt(pair.private_part, env) == plaintext


def test_payload_limit():
    pair = generate_keypair("region-1")
    env = encrypt(pair.public_part, b"x" * PAYLOAD_LIMIT, key_id=pair.key_id)
    assert len(decrypt(pair.private_part, env)) == PAYLOAD_LIMIT
    with pytest.raises(ValueError):
        encrypt(pair.public_part, b"x" * (PAYLOAD_LIMIT + 1))


# ---------------------------------------------------------------------------
# freshness


def test_repeat_encryption_is_randomized():
    pair = generate_keypair("region-1")
    a = encrypt(pair.public_part, b"same message", key_id=pair.key_id)
    b = encrypt(pair.public_part, b"same message", key_id=pair.key_id)
    assert a.ciphertext != b.ciphertext
    assert a.nonce != b.nonce
    assert a.ephemeral_public != b.ephemeral_public


def test_nonce_uniqueness_smoke():
    # The full 10^5 sweep runs in the acceptance suite; this is a fast check.
    pair = generate_keypair("region-1")
    nonces = {encrypt(pair.public_part, b"m").nonce for _ in range(2000)}
    assert len(nonces) == 2000


# ---------------------------------------------------------------------------
# authentication failures


def test_wrong_key_fails():
    pair = generate_keypair("region-1")
    other = generate_keypair("region-2")
    env = encrypt(pair.public_part, b"secret", key_id=pair.key_id)
    with pytest.raises(AuthenticationFailure):
        decrypt(other.private_part, env)


def test_ciphertext_bit_flips_exhaustive():
    # Every single-bit corruption of an 8-byte payload's ciphertext must fail.
    pair = generate_keypair("region-1")
    env = encrypt(pair.public_part, b"8 bytes.", key_id=pair.key_id)
    assert len(env.ciphertext) == 8
    for bit in range(len(env.ciphertext) * 8):
        bad = EncryptedEnvelope(
            key_id=env.key_id,
            ephemeral_public=env.ephemeral_public,
            nonce=env.nonce,
            ciphertext=flip_bit(env.ciphertext, bit),
            auth_tag=env.auth_tag,
        )
        with pytest.raises(AuthenticationFailure):
            decrypt(pair.private_part, bad)


def test_auth_tag_bit_flips_exhaustive():
    pair = generate_keypair("region-1")
    env = encrypt(pair.public_part, b"8 bytes.", key_id=pair.key_id)
    for bit in range(len(env.auth_tag) * 8):
        bad = EncryptedEnvelope(
            key_id=env.key_id,
            ephemeral_public=env.ephemeral_public,
            nonce=env.nonce,
            ciphertext=env.ciphertext,
            auth_tag=flip_bit(env.auth_tag, bit),
        )
        with pytest.raises(AuthenticationFailure):
            decrypt(pair.private_part, bad)


@settings(max_examples=200, deadline=None)
@given(
    field=st.sampled_from(["key_id", "ephemeral_public", "nonce", "ciphertext", "auth_tag"]),
    position=st.integers(min_value=0, max_value=10**9),
    delta=st.integers(min_value=1, max_value=255),
)
def test_any_field_mutation_fails(field, position, delta):
    # Single-byte mutation of any envelope field must fail authentication.
    pair = generate_keypair("region-1")
    env = encrypt(pair.public_part, b"tamper with me", key_id=pair.key_id)
    parts = {
        "key_id": env.key_id.encode(),
        "ephemeral_public": env.ephemeral_public,
        "nonce": env.nonce,
        "ciphertext": env.ciphertext,
        "auth_tag": env.auth_tag,
    }
    original = parts[field]
    mutated = bytearray(original)
    mutated[position % len(original)] = (mutated[position % len(original)] + delta) % 256
    parts[field] = bytes(mutated)
    if field == "key_id":
        try:
            parts["key_id"] = parts["key_id"].decode()
        except UnicodeDecodeError:
            return  # not a representable key_id mutation
    else:
        parts["key_id"] = env.key_id
    bad = EncryptedEnvelope(
        key_id=parts["key_id"],
        ephemeral_public=parts["ephemeral_public"],
        nonce=parts["nonce"],
        ciphertext=parts["ciphertext"],
        auth_tag=parts["auth_tag"],
    )
    with pytest.raises(AuthenticationFailure):
        decrypt(pair.private_part, bad)


def test_ciphertexts_share_no_long_substring():
    # Weak indistinguishability smoke test over 100 trials.
    pair = generate_keypair("region-1")
    left = bytes(range(64))
    right = bytes(reversed(range(64)))
    for _ in range(100):
        a = encrypt(pair.public_part, left).ciphertext
        b = encrypt(pair.public_part, right).ciphertext
        assert longest_common_substring(a, b) < 6


# ---------------------------------------------------------------------------
# key material handling


def test_malformed_public_key():
    with pytest.raises(EncodingError):
        encrypt(b"short", b"m")


def test_generate_keypair_contract():
    with pytest.raises(ValueError):
        generate_keypair("")
    a = generate_keypair("region-1")
    b = generate_keypair("region-1")
    assert a.key_id != b.key_id
    assert a.key_id.startswith("region-1-")
    assert len(a.public_part) == 32 and len(a.private_part) == 32


# ---------------------------------------------------------------------------
# wrap / unwrap


def test_wrap_round_trip_many():
    rng = random.Random(0x917)
    shared = rng.randbytes(32)
    for _ in range(100):
        secret = rng.randbytes(32)
        assert unwrap_key(shared, wrap_key(shared, secret)) == secret


def test_wrap_wrong_key_fails():
    secret = b"s" * 32
    wk = wrap_key(b"a" * 32, secret)
    with pytest.raises(AuthenticationFailure):
        unwrap_key(b"b" * 32, wk)


def test_wrap_nonce_freshness():
    secret = b"s" * 32
    a = wrap_key(b"k" * 32, secret)
    b = wrap_key(b"k" * 32, secret)
    assert a.nonce != b.nonce
    assert a.wrapped_bytes != b.wrapped_bytes


def test_unwrap_truncated_fails():
    wk = wrap_key(b"k" * 32, b"s" * 32)
    cut = WrappedKey(wrapped_bytes=wk.wrapped_bytes[:-1], nonce=wk.nonce, auth_tag=wk.auth_tag)
    with pytest.raises(AuthenticationFailure):
        unwrap_key(b"k" * 32, cut)


def test_wrap_key_length_checks():
    with pytest.raises(EncodingError):
        wrap_key(b"", b"s" * 32)
    with pytest.raises(EncodingError):
        wrap_key(b"k" * 31, b"s" * 32)
    wk = wrap_key(b"k" * 32, b"s" * 32)
    with pytest.raises(EncodingError):
        unwrap_key(b"", wk)


# ---------------------------------------------------------------------------
# wire format


def test_envelope_wire_shape():
    pair = generate_keypair("region-1")
    env = encrypt(pair.public_part, b"payload", key_id=pair.key_id)
    obj = env.to_obj()
    assert set(obj) == {"key_id", "ephemeral_public", "nonce", "ciphertext", "auth_tag"}
    assert obj["key_id"] == pair.key_id
    for name in ("ephemeral_public", "nonce", "ciphertext", "auth_tag"):
        base64.b64decode(obj[name], validate=True)
    # Survives an actual JSON round-trip, not just dict identity.
    back = EncryptedEnvelope.from_obj(json.loads(json.dumps(obj)))
    assert back == env
    assert decrypt(pair.private_part, back) == b"payload"
    assert len(back.nonce) == NONCE_LEN


def test_envelope_decode_errors():
    pair = generate_keypair("region-1")
    obj = encrypt(pair.public_part, b"m", key_id=pair.key_id).to_obj()
    with pytest.raises(EncodingError):
        EncryptedEnvelope.from_obj({**obj, "nonce": "*not base64*"})
    missing = dict(obj)
    del missing["auth_tag"]
    with pytest.raises(EncodingError):
        EncryptedEnvelope.from_obj(missing)
    with pytest.raises(EncodingError):
        EncryptedEnvelope.from_obj(["not", "an", "object"])


def test_wrapped_key_wire_shape():
    wk = wrap_key(b"k" * 32, b"s" * 32)
    obj = wk.to_obj()
    assert set(obj) == {"wrapped_bytes", "nonce", "auth_tag"}
    assert WrappedKey.from_obj(json.loads(json.dumps(obj))) == wk
    with pytest.raises(EncodingError):
        WrappedKey.from_obj({"wrapped_bytes": "AA=="})


def test_module_exports_constants():
    assert envelope.SHARED_KEY_LEN == 32
    assert envelope.PAYLOAD_LIMIT == 64 * 1024
