"""Simulated-enclave identity, quoting, and the attested key-agreement handshake.

There is no hardware here: a component's *measurement* is a digest of its
declared code-identity string, and a local verification root (a plain
Ed25519 key pair standing in for the vendor attestation service) endorses
each component's signing key offline. The handshake is a two-message
challenge/response: the challenger sends a fresh ephemeral public key and
nonce; the attester answers with its own ephemeral key plus a quote whose
report data commits to the whole transcript. Verification checks the
endorsement chain, the quote signature, the transcript binding, and the
expected measurement; only then is the shared key derived. A quote replayed
into any other handshake fails the transcript check.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .envelope import SHARED_KEY_LEN, _b64, _unb64
from .errors import AttestationRejected, EncodingError, ProtocolError

MEASUREMENT_LEN = 32
CHALLENGE_NONCE_LEN = 16
REPORT_DATA_LEN = 64
_EPHEMERAL_LEN = 32

_MEASUREMENT_DOMAIN = b"trustbus/measurement/v1:"
_ENDORSE_DOMAIN = b"trustbus/endorse/v1:"
_QUOTE_DOMAIN = b"trustbus/quote/v1:"
_SHARED_INFO = b"trustbus/ra-shared/v1"


def compute_measurement(code_identity: str) -> bytes:
    """Deterministic 32-byte digest of a component's declared code identity."""
    if not code_identity:
        raise ValueError("code identity must be non-empty")
    return hashlib.sha256(_MEASUREMENT_DOMAIN + code_identity.encode("utf-8")).digest()


def generate_root_keypair() -> tuple[bytes, bytes]:
    """Create the verification root (private, public) as raw Ed25519 bytes."""
    private = Ed25519PrivateKey.generate()
    return (
        private.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        ),
        private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        ),
    )


def issue_endorsement(
    avs_root_private: bytes, measurement: bytes, signing_public: bytes
) -> bytes:
    """Root signature binding a component's signing key to its measurement."""
    if len(measurement) != MEASUREMENT_LEN:
        raise EncodingError(f"measurement must be {MEASUREMENT_LEN} bytes")
    try:
        root = Ed25519PrivateKey.from_private_bytes(bytes(avs_root_private))
    except (ValueError, TypeError) as exc:
        raise EncodingError(f"malformed root key: {exc}") from exc
    return root.sign(_ENDORSE_DOMAIN + measurement + signing_public)


@dataclass(frozen=True)
class EnclaveIdentity:
    """A simulated enclave: measurement plus an endorsed signing key."""

    measurement: bytes
    signing_private: bytes
    signing_public: bytes
    endorsement: bytes

    @classmethod
    def provision(cls, code_identity: str, avs_root_private: bytes) -> "EnclaveIdentity":
        """Measure the identity string, mint a signing key, endorse it."""
        measurement = compute_measurement(code_identity)
        signer = Ed25519PrivateKey.generate()
        signing_private = signer.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        signing_public = signer.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        endorsement = issue_endorsement(avs_root_private, measurement, signing_public)
        return cls(measurement, signing_private, signing_public, endorsement)

    def to_obj(self) -> dict:
        return {
            "measurement": _b64(self.measurement),
            "signing_private": _b64(self.signing_private),
            "signing_public": _b64(self.signing_public),
            "endorsement": _b64(self.endorsement),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "EnclaveIdentity":
        return cls(
            measurement=_unb64(obj["measurement"]),
            signing_private=_unb64(obj["signing_private"]),
            signing_public=_unb64(obj["signing_public"]),
            endorsement=_unb64(obj["endorsement"]),
        )


@dataclass(frozen=True)
class AttestationQuote:
    """Signed evidence binding a measurement to one handshake transcript.

    ``signing_public`` travels with the quote so the verifier can check the
    signature; the endorsement ties that key to the measurement.
    """

    measurement: bytes
    report_data: bytes
    signature: bytes
    endorsement: bytes
    signing_public: bytes

    def to_obj(self) -> dict:
        return {
            "measurement": _b64(self.measurement),
            "report_data": _b64(self.report_data),
            "signature": _b64(self.signature),
            "endorsement": _b64(self.endorsement),
            "signing_public": _b64(self.signing_public),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "AttestationQuote":
        if not isinstance(obj, dict):
            raise ProtocolError("quote must be a JSON object")
        try:
            return cls(
                measurement=_unb64(obj["measurement"]),
                report_data=_unb64(obj["report_data"]),
                signature=_unb64(obj["signature"]),
                endorsement=_unb64(obj["endorsement"]),
                signing_public=_unb64(obj["signing_public"]),
            )
        except (KeyError, EncodingError) as exc:
            raise ProtocolError(f"malformed quote: {exc}") from exc


@dataclass(frozen=True)
class Challenge:
    """First handshake message: the challenger's ephemeral key and nonce."""

    challenger_ephemeral_public: bytes
    challenge_nonce: bytes

    def to_obj(self) -> dict:
        return {
            "challenger_ephemeral_public": _b64(self.challenger_ephemeral_public),
            "challenge_nonce": _b64(self.challenge_nonce),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Challenge":
        if not isinstance(obj, dict):
            raise ProtocolError("challenge must be a JSON object")
        try:
            return cls(
                challenger_ephemeral_public=_unb64(obj["challenger_ephemeral_public"]),
                challenge_nonce=_unb64(obj["challenge_nonce"]),
            )
        except (KeyError, EncodingError) as exc:
            raise ProtocolError(f"malformed challenge: {exc}") from exc


@dataclass(frozen=True)
class HandshakeResponse:
    """Second handshake message: attester's ephemeral key plus its quote."""

    attester_ephemeral_public: bytes
    quote: AttestationQuote

    def to_obj(self) -> dict:
        return {
            "attester_ephemeral_public": _b64(self.attester_ephemeral_public),
            "quote": self.quote.to_obj(),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "HandshakeResponse":
        if not isinstance(obj, dict):
            raise ProtocolError("response must be a JSON object")
        try:
            return cls(
                attester_ephemeral_public=_unb64(obj["attester_ephemeral_public"]),
                quote=AttestationQuote.from_obj(obj["quote"]),
            )
        except (KeyError, EncodingError) as exc:
            raise ProtocolError(f"malformed response: {exc}") from exc


@dataclass(frozen=True)
class HandshakeResult:
    shared_key: bytes
    peer_measurement: bytes
    transcript_hash: bytes


@dataclass(frozen=True)
class ChallengerState:
    """Challenger-side secrets kept between the two handshake messages."""

    ephemeral_private: bytes
    ephemeral_public: bytes
    challenge_nonce: bytes


def ra_challenge(challenger_ephemeral_public: bytes, challenge_nonce: bytes) -> Challenge:
    """Build the first handshake message; the nonce must be fresh per handshake."""
    if len(challenger_ephemeral_public) != _EPHEMERAL_LEN:
        raise EncodingError(f"ephemeral public key must be {_EPHEMERAL_LEN} bytes")
    if len(challenge_nonce) != CHALLENGE_NONCE_LEN:
        raise EncodingError(f"challenge nonce must be {CHALLENGE_NONCE_LEN} bytes")
    return Challenge(challenger_ephemeral_public, challenge_nonce)


def new_challenge() -> tuple[Challenge, ChallengerState]:
    """Start a handshake: fresh ephemeral key pair and nonce."""
    ephemeral = X25519PrivateKey.generate()
    ephemeral_private = ephemeral.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )
    ephemeral_public = ephemeral.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    nonce = os.urandom(CHALLENGE_NONCE_LEN)
    return (
        ra_challenge(ephemeral_public, nonce),
        ChallengerState(ephemeral_private, ephemeral_public, nonce),
    )


def _transcript(challenger_public: bytes, attester_public: bytes, nonce: bytes) -> bytes:
    return challenger_public + attester_public + nonce


def _derive_shared_key(shared_secret: bytes, nonce: bytes, transcript_hash: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=SHARED_KEY_LEN,
        salt=nonce,
        info=_SHARED_INFO + transcript_hash,
    ).derive(shared_secret)


def ra_respond(
    identity: EnclaveIdentity, challenge: Challenge
) -> tuple[HandshakeResponse, HandshakeResult]:
    """Answer a challenge with a quoted response and derive the shared key.

    The attester cannot know the challenger's measurement, so the result's
    ``peer_measurement`` is all zeros on this side.
    """
    if len(challenge.challenger_ephemeral_public) != _EPHEMERAL_LEN:
        raise ProtocolError("challenge carries a malformed ephemeral key")
    if len(challenge.challenge_nonce) != CHALLENGE_NONCE_LEN:
        raise ProtocolError("challenge carries a malformed nonce")
    try:
        challenger_public = X25519PublicKey.from_public_bytes(
            challenge.challenger_ephemeral_public
        )
    except ValueError as exc:
        raise ProtocolError(f"challenge carries an invalid key: {exc}") from exc

    ephemeral = X25519PrivateKey.generate()
    attester_public = ephemeral.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    transcript = _transcript(
        challenge.challenger_ephemeral_public, attester_public, challenge.challenge_nonce
    )
    report_data = hashlib.sha512(transcript).digest()
    transcript_hash = hashlib.sha256(transcript).digest()

    signer = Ed25519PrivateKey.from_private_bytes(identity.signing_private)
    signature = signer.sign(_QUOTE_DOMAIN + identity.measurement + report_data)
    quote = AttestationQuote(
        measurement=identity.measurement,
        report_data=report_data,
        signature=signature,
        endorsement=identity.endorsement,
        signing_public=identity.signing_public,
    )
    shared_key = _derive_shared_key(
        ephemeral.exchange(challenger_public), challenge.challenge_nonce, transcript_hash
    )
    result = HandshakeResult(
        shared_key=shared_key,
        peer_measurement=bytes(MEASUREMENT_LEN),
        transcript_hash=transcript_hash,
    )
    return HandshakeResponse(attester_public, quote), result


def ra_verify(
    avs_root_public: bytes,
    expected_measurement: bytes,
    state: ChallengerState,
    response: HandshakeResponse,
) -> HandshakeResult:
    """Verify a quoted response and derive the shared key.

    Checks, in order: endorsement chain, quote signature, transcript
    binding, measurement equality. Every rejection raises before any key
    material is derived.
    """
    quote = response.quote
    try:
        root = Ed25519PublicKey.from_public_bytes(bytes(avs_root_public))
    except (ValueError, TypeError) as exc:
        raise EncodingError(f"malformed root public key: {exc}") from exc

    try:
        root.verify(
            quote.endorsement, _ENDORSE_DOMAIN + quote.measurement + quote.signing_public
        )
    except InvalidSignature:
        raise AttestationRejected("endorsement does not verify") from None

    try:
        signer_public = Ed25519PublicKey.from_public_bytes(quote.signing_public)
        signer_public.verify(
            quote.signature, _QUOTE_DOMAIN + quote.measurement + quote.report_data
        )
    except (ValueError, InvalidSignature):
        raise AttestationRejected("quote signature does not verify") from None

    transcript = _transcript(
        state.ephemeral_public, response.attester_ephemeral_public, state.challenge_nonce
    )
    if quote.report_data != hashlib.sha512(transcript).digest():
        raise AttestationRejected("quote is bound to a different handshake")

    if quote.measurement != bytes(expected_measurement):
        raise AttestationRejected("measurement mismatch")

    try:
        attester_public = X25519PublicKey.from_public_bytes(
            response.attester_ephemeral_public
        )
    except ValueError:
        raise AttestationRejected("response carries an invalid ephemeral key") from None

    private = X25519PrivateKey.from_private_bytes(state.ephemeral_private)
    transcript_hash = hashlib.sha256(transcript).digest()
    shared_key = _derive_shared_key(
        private.exchange(attester_public), state.challenge_nonce, transcript_hash
    )
    return HandshakeResult(
        shared_key=shared_key,
        peer_measurement=quote.measurement,
        transcript_hash=transcript_hash,
    )
