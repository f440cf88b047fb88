"""Hybrid public-key envelope encryption for telemetry payloads.

Each envelope performs a fresh X25519 key agreement against the recipient
public key, derives a 256-bit symmetric key with HKDF-SHA256, and encrypts
the payload with AES-256-GCM. The broker and every transport hop see only
the envelope; any modification of any field fails authentication on
decrypt. The same AEAD construction, keyed directly with a 32-byte shared
secret, wraps private keys for delivery after an attestation handshake.
"""

from __future__ import annotations

import base64
import os
import uuid
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthenticationFailure, EncodingError

PAYLOAD_LIMIT = 64 * 1024
SHARED_KEY_LEN = 32
PUBLIC_KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16

_ENVELOPE_INFO = b"trustbus/envelope/v1"
_WRAP_AAD = b"trustbus/wrap/v1"


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except Exception as exc:
        raise EncodingError(f"invalid base64 field: {exc}") from exc


@dataclass(frozen=True)
class KeyPair:
    """An asymmetric pair; ``public_part``/``private_part`` are raw X25519 bytes."""

    key_id: str
    public_part: bytes
    private_part: bytes


@dataclass(frozen=True)
class EncryptedEnvelope:
    """The only form in which a payload transits or rests outside a trusted boundary."""

    key_id: str
    ephemeral_public: bytes
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes

    def to_obj(self) -> dict:
        """JSON object with base64 byte fields; this exact shape is the
        broker attribute value format."""
        return {
            "key_id": self.key_id,
            "ephemeral_public": _b64(self.ephemeral_public),
            "nonce": _b64(self.nonce),
            "ciphertext": _b64(self.ciphertext),
            "auth_tag": _b64(self.auth_tag),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "EncryptedEnvelope":
        if not isinstance(obj, dict):
            raise EncodingError("envelope must be a JSON object")
        try:
            key_id = obj["key_id"]
            fields = {
                name: _unb64(obj[name])
                for name in ("ephemeral_public", "nonce", "ciphertext", "auth_tag")
            }
        except KeyError as exc:
            raise EncodingError(f"envelope missing field {exc}") from exc
        if not isinstance(key_id, str):
            raise EncodingError("envelope key_id must be a string")
        return cls(key_id=key_id, **fields)


@dataclass(frozen=True)
class WrappedKey:
    """A secret encrypted under a 32-byte shared key."""

    wrapped_bytes: bytes
    nonce: bytes
    auth_tag: bytes

    def to_obj(self) -> dict:
        return {
            "wrapped_bytes": _b64(self.wrapped_bytes),
            "nonce": _b64(self.nonce),
            "auth_tag": _b64(self.auth_tag),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "WrappedKey":
        if not isinstance(obj, dict):
            raise EncodingError("wrapped key must be a JSON object")
        try:
            return cls(
                wrapped_bytes=_unb64(obj["wrapped_bytes"]),
                nonce=_unb64(obj["nonce"]),
                auth_tag=_unb64(obj["auth_tag"]),
            )
        except KeyError as exc:
            raise EncodingError(f"wrapped key missing field {exc}") from exc


def generate_keypair(scope: str) -> KeyPair:
    """Generate a fresh scoped key pair with a unique ``key_id``."""
    if not scope:
        raise ValueError("scope must be non-empty")
    private = X25519PrivateKey.generate()
    private_part = private.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )
    public_part = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    key_id = f"{scope}-{uuid.uuid4().hex[:12]}"
    return KeyPair(key_id=key_id, public_part=public_part, private_part=private_part)


def _load_public(public_part: bytes) -> X25519PublicKey:
    try:
        return X25519PublicKey.from_public_bytes(bytes(public_part))
    except (ValueError, TypeError) as exc:
        raise EncodingError(f"malformed public key: {exc}") from exc


def _load_private(private_part: bytes) -> X25519PrivateKey:
    try:
        return X25519PrivateKey.from_private_bytes(bytes(private_part))
    except (ValueError, TypeError) as exc:
        raise EncodingError(f"malformed private key: {exc}") from exc


def _derive_envelope_key(shared_secret: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=SHARED_KEY_LEN,
        salt=None,
        info=_ENVELOPE_INFO,
    ).derive(shared_secret)


def _envelope_aad(key_id: str, ephemeral_public: bytes) -> bytes:
    # Binds the envelope header so header tampering also fails authentication.
    return key_id.encode("utf-8") + b"|" + ephemeral_public


def encrypt(public_part: bytes, plaintext: bytes, key_id: str = "") -> EncryptedEnvelope:
    """Encrypt ``plaintext`` so only the holder of the matching private key
    can read it. Every call uses a fresh ephemeral key and nonce."""
    if len(plaintext) > PAYLOAD_LIMIT:
        raise ValueError(f"plaintext exceeds {PAYLOAD_LIMIT} byte limit")
    recipient = _load_public(public_part)
    ephemeral = X25519PrivateKey.generate()
    ephemeral_public = ephemeral.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    key = _derive_envelope_key(ephemeral.exchange(recipient))
    nonce = os.urandom(NONCE_LEN)
    sealed = AESGCM(key).encrypt(nonce, plaintext, _envelope_aad(key_id, ephemeral_public))
    return EncryptedEnvelope(
        key_id=key_id,
        ephemeral_public=ephemeral_public,
        nonce=nonce,
        ciphertext=sealed[:-TAG_LEN],
        auth_tag=sealed[-TAG_LEN:],
    )


def decrypt(private_part: bytes, env: EncryptedEnvelope) -> bytes:
    """Authenticate and decrypt an envelope.

    A wrong key and a tampered envelope raise the same error.
    """
    private = _load_private(private_part)
    try:
        ephemeral = X25519PublicKey.from_public_bytes(bytes(env.ephemeral_public))
        shared_secret = private.exchange(ephemeral)
    except ValueError:
        # Degenerate ephemeral points fail like any other tampering.
        raise AuthenticationFailure("envelope authentication failed") from None
    key = _derive_envelope_key(shared_secret)
    try:
        return AESGCM(key).decrypt(
            env.nonce,
            env.ciphertext + env.auth_tag,
            _envelope_aad(env.key_id, env.ephemeral_public),
        )
    except InvalidTag:
        raise AuthenticationFailure("envelope authentication failed") from None


def wrap_key(shared_key: bytes, private_part: bytes) -> WrappedKey:
    """Authenticated symmetric encryption of a secret under a handshake key."""
    if len(shared_key) != SHARED_KEY_LEN:
        raise EncodingError(f"shared key must be {SHARED_KEY_LEN} bytes")
    nonce = os.urandom(NONCE_LEN)
    sealed = AESGCM(bytes(shared_key)).encrypt(nonce, private_part, _WRAP_AAD)
    return WrappedKey(
        wrapped_bytes=sealed[:-TAG_LEN], nonce=nonce, auth_tag=sealed[-TAG_LEN:]
    )


def unwrap_key(shared_key: bytes, wk: WrappedKey) -> bytes:
    """Inverse of :func:`wrap_key`; fails authentication under any other key."""
    if len(shared_key) != SHARED_KEY_LEN:
        raise EncodingError(f"shared key must be {SHARED_KEY_LEN} bytes")
    try:
        return AESGCM(bytes(shared_key)).decrypt(
            wk.nonce, wk.wrapped_bytes + wk.auth_tag, _WRAP_AAD
        )
    except InvalidTag:
        raise AuthenticationFailure("key unwrap failed") from None
