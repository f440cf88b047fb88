"""trustbus: encrypted pub/sub telemetry with attested key distribution.

Producers encrypt measurements at the source, a context broker relays only
ciphertext, and consumers obtain decryption keys from a key vault after a
remote-attestation handshake. Identity and access control sit in front of
the broker and the vault as separate services. A benchmark harness wires
the whole topology together and measures it.
"""

__version__ = "0.1.0"
