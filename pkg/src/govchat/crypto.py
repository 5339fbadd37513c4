"""Deterministic, versioned cryptographic primitives.

Fixed suite so wire formats are bit-exact across implementations:

- signatures: Ed25519 (raw 32-byte keys, 64-byte signatures)
- hashing: SHA-256
- public-key sealing: ephemeral X25519 + HKDF-SHA-256 + AES-256-GCM
- symmetric AEAD: AES-256-GCM
- key derivation: HKDF-SHA-256 with info = label || 0x00 || context

All randomness is injectable via a ``rand(n) -> bytes`` callable so
multi-client scenarios can be replayed deterministically in tests.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecryptError, InvalidKeyError

RandFn = Callable[[int], bytes]

# 32-byte digest; plain bytes, length-checked where produced.
Digest32 = bytes

SEAL_OVERHEAD = 32 + 12 + 16  # ephemeral pk + nonce + GCM tag
AEAD_TAG_LEN = 16
NONCE_LEN = 12


@dataclass(frozen=True)
class SigKeyPair:
    """Ed25519 keypair; ``public`` is derivable from ``secret``."""

    public: bytes
    secret: bytes


@dataclass(frozen=True)
class KemKeyPair:
    """X25519 keypair used for sealing secrets to a recipient."""

    public: bytes
    secret: bytes


def generate_sig_keypair(rand: RandFn = os.urandom) -> SigKeyPair:
    seed = rand(32)
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    return SigKeyPair(public=priv.public_key().public_bytes_raw(), secret=seed)


def generate_kem_keypair(rand: RandFn = os.urandom) -> KemKeyPair:
    seed = rand(32)
    priv = X25519PrivateKey.from_private_bytes(seed)
    return KemKeyPair(public=priv.public_key().public_bytes_raw(), secret=seed)


def sig_public_key(secret: bytes) -> bytes:
    try:
        return Ed25519PrivateKey.from_private_bytes(secret).public_key().public_bytes_raw()
    except (ValueError, TypeError) as exc:
        raise InvalidKeyError(f"malformed signing key: {exc}") from exc


def sign(secret: bytes, msg: bytes) -> bytes:
    """Deterministic Ed25519 signature over exactly the given bytes."""
    try:
        priv = Ed25519PrivateKey.from_private_bytes(secret)
    except (ValueError, TypeError) as exc:
        raise InvalidKeyError(f"malformed signing key: {exc}") from exc
    return priv.sign(msg)


def verify(public: bytes, msg: bytes, sig: bytes) -> bool:
    """True iff ``sig`` is a valid signature of ``msg`` under ``public``.

    Malformed inputs return False rather than raising.
    """
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, msg)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def sha256(msg: bytes) -> Digest32:
    return hashlib.sha256(msg).digest()


def kdf(secret: bytes, label: str, context: bytes = b"") -> bytes:
    """HKDF-SHA-256, 32 bytes, info = label || 0x00 || context."""
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=label.encode("utf-8") + b"\x00" + context,
    ).derive(secret)


def aead_encrypt(key: bytes, nonce: bytes, aad: bytes, pt: bytes) -> bytes:
    if len(nonce) != NONCE_LEN:
        raise InvalidKeyError("nonce must be 12 bytes")
    return AESGCM(key).encrypt(nonce, pt, aad)


def aead_decrypt(key: bytes, nonce: bytes, aad: bytes, ct: bytes) -> bytes:
    try:
        return AESGCM(key).decrypt(nonce, ct, aad)
    except (InvalidTag, ValueError) as exc:
        raise DecryptError("AEAD authentication failed") from exc


def seal(public: bytes, msg: bytes, rand: RandFn = os.urandom) -> bytes:
    """Encrypt ``msg`` so only the holder of the matching KEM secret can read it.

    Output layout: ephemeral_pk(32) || nonce(12) || aead_ct(len(msg)+16).
    """
    try:
        recipient = X25519PublicKey.from_public_bytes(public)
    except (ValueError, TypeError) as exc:
        raise InvalidKeyError(f"malformed KEM public key: {exc}") from exc
    eph_secret = rand(32)
    eph_priv = X25519PrivateKey.from_private_bytes(eph_secret)
    eph_pk = eph_priv.public_key().public_bytes_raw()
    shared = eph_priv.exchange(recipient)
    key = kdf(shared, "seal", eph_pk + public)
    nonce = rand(NONCE_LEN)
    ct = aead_encrypt(key, nonce, b"", msg)
    return eph_pk + nonce + ct


def open_sealed(secret: bytes, blob: bytes) -> bytes:
    """Inverse of :func:`seal`; raises DecryptError on any tampering or wrong key."""
    if len(blob) < SEAL_OVERHEAD:
        raise DecryptError("sealed blob too short")
    eph_pk, nonce, ct = blob[:32], blob[32:44], blob[44:]
    try:
        priv = X25519PrivateKey.from_private_bytes(secret)
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pk))
    except (ValueError, TypeError) as exc:
        raise DecryptError(f"malformed sealed blob or key: {exc}") from exc
    public = priv.public_key().public_bytes_raw()
    key = kdf(shared, "seal", eph_pk + public)
    return aead_decrypt(key, nonce, b"", ct)


class DeterministicRand:
    """Seeded byte stream for reproducible keygen/sealing in tests and replays.

    Stretches a seed with SHA-256 in counter mode; NOT a secure RNG.
    """

    def __init__(self, seed: bytes | str):
        if isinstance(seed, str):
            seed = seed.encode("utf-8")
        self._seed = sha256(seed)
        self._counter = 0
        self._buffer = b""

    def __call__(self, n: int) -> bytes:
        while len(self._buffer) < n:
            block = sha256(self._seed + self._counter.to_bytes(8, "big"))
            self._counter += 1
            self._buffer += block
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out
