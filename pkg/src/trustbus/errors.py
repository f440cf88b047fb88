"""Exception types shared across trustbus components."""


class TrustbusError(Exception):
    """Base class for all trustbus errors."""


class EncodingError(TrustbusError):
    """Malformed or wrongly-sized key material, nonce, or wire message."""


class AuthenticationFailure(TrustbusError):
    """Authenticated decryption failed.

    Raised identically for a wrong key and for tampered data so callers
    cannot distinguish the two cases.
    """


class ProtocolError(TrustbusError):
    """A handshake or service message does not follow the protocol."""


class AttestationRejected(TrustbusError):
    """Attestation evidence failed verification; no key material released."""


class AuthenticationFailed(TrustbusError):
    """Credential check failed (unknown user and bad password look alike)."""


class InvalidToken(TrustbusError):
    """Access token is unknown or expired."""


class PoisonMessage(TrustbusError):
    """A delivered payload could not be decrypted or violates the schema."""


class ComparisonInvalid(TrustbusError):
    """Benchmark reports are not comparable (mismatched configuration)."""


class SetupFailed(TrustbusError):
    """A benchmark topology failed to come up healthy."""
