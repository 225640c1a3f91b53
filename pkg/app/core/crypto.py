"""
Primitives shared by every overlay: SHA-256 digests, Ed25519 signatures over
digests, sealed boxes for direct messages, and partial-hash-collision
proof-of-work.

Everything here is a pure function of its inputs except `seal_for`, which
takes an explicit seeded `random.Random` so simulations stay reproducible.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from app.core.encoding import U64_MAX, FixedBytes, canonical_encode

_RAW = serialization.Encoding.Raw
_RAW_PUBLIC = serialization.PublicFormat.Raw
_BOX_INFO = b"twister-sealed-box/v1"
_EPHEMERAL_LEN = 32
_NONCE_LEN = 12
_TAG_LEN = 16


class CryptoError(Exception):
    """Base error for primitive misuse."""


class DecryptionError(CryptoError):
    """Sealed box does not open under the given key."""


class IntegrityError(CryptoError):
    """Sealed box opened but the plaintext digest does not match."""


class Digest(FixedBytes):
    """256-bit SHA-256 value, ordered bytewise (big-endian)."""


def hash_bytes(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def hash_value(value) -> Digest:
    """Digest of the canonical encoding of a structured value."""
    return hash_bytes(canonical_encode(value))


@dataclass(frozen=True)
class PublicKey:
    sign_key: bytes
    box_key: bytes

    def fingerprint(self) -> Digest:
        return hash_value(self)


@dataclass(frozen=True)
class PrivateKey:
    seed: bytes = field(repr=False)

    def signer(self) -> ed25519.Ed25519PrivateKey:
        return ed25519.Ed25519PrivateKey.from_private_bytes(self.seed)

    def box(self) -> x25519.X25519PrivateKey:
        # separate key material for key agreement, derived from the same seed
        return x25519.X25519PrivateKey.from_private_bytes(
            hash_bytes(self.seed + b"/box").value
        )


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    private: PrivateKey


@dataclass(frozen=True)
class SignedContent:
    signature: bytes
    payload: bytes
    signer_hint: str = ""


@dataclass(frozen=True)
class SealedBox:
    ciphertext: bytes
    payload_digest: Digest


def generate_keypair(seed: bytes) -> KeyPair:
    if len(seed) != 32:
        raise CryptoError("key seed must be 32 bytes")
    private = PrivateKey(seed)
    public = PublicKey(
        sign_key=private.signer().public_key().public_bytes(_RAW, _RAW_PUBLIC),
        box_key=private.box().public_key().public_bytes(_RAW, _RAW_PUBLIC),
    )
    return KeyPair(public=public, private=private)


def sign(private: PrivateKey, data: bytes, signer_hint: str = "") -> SignedContent:
    signature = private.signer().sign(hash_bytes(data).value)
    return SignedContent(signature=signature, payload=data, signer_hint=signer_hint)


def verify(public: PublicKey, signed: SignedContent) -> bool:
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(public.sign_key)
        key.verify(signed.signature, hash_bytes(signed.payload).value)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def _box_key(shared: bytes, ephemeral: bytes, recipient: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=_BOX_INFO + ephemeral + recipient,
    ).derive(shared)


def seal_for(public: PublicKey, plaintext: bytes, rng: random.Random) -> SealedBox:
    """Ephemeral X25519 agreement + AES-GCM; only `public`'s owner can open it."""
    if not plaintext:
        raise CryptoError("cannot seal an empty plaintext")
    ephemeral = x25519.X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    ephemeral_raw = ephemeral.public_key().public_bytes(_RAW, _RAW_PUBLIC)
    shared = ephemeral.exchange(x25519.X25519PublicKey.from_public_bytes(public.box_key))
    key = _box_key(shared, ephemeral_raw, public.box_key)
    nonce = rng.randbytes(_NONCE_LEN)
    body = AESGCM(key).encrypt(nonce, plaintext, ephemeral_raw)
    return SealedBox(
        ciphertext=ephemeral_raw + nonce + body,
        payload_digest=hash_bytes(plaintext),
    )


def open_with(private: PrivateKey, box: SealedBox) -> bytes:
    if len(box.ciphertext) < _EPHEMERAL_LEN + _NONCE_LEN + _TAG_LEN:
        raise DecryptionError("ciphertext too short")
    ephemeral_raw = box.ciphertext[:_EPHEMERAL_LEN]
    nonce = box.ciphertext[_EPHEMERAL_LEN:_EPHEMERAL_LEN + _NONCE_LEN]
    body = box.ciphertext[_EPHEMERAL_LEN + _NONCE_LEN:]
    box_private = private.box()
    recipient = box_private.public_key().public_bytes(_RAW, _RAW_PUBLIC)
    try:
        shared = box_private.exchange(x25519.X25519PublicKey.from_public_bytes(ephemeral_raw))
        plaintext = AESGCM(_box_key(shared, ephemeral_raw, recipient)).decrypt(
            nonce, body, ephemeral_raw
        )
    except (InvalidTag, ValueError) as e:
        raise DecryptionError("sealed box does not open under this key") from e
    if hash_bytes(plaintext) != box.payload_digest:
        raise IntegrityError("plaintext digest mismatch")
    return plaintext


def leading_zero_bits(digest: Digest) -> int:
    return 256 - digest.as_int().bit_length()


def _pow_prefix(payload: bytes) -> "hashlib._Hash":
    # canonical_encode([payload, nonce]) minus the trailing 8 nonce bytes
    return hashlib.sha256(canonical_encode([payload, 0])[:-8])


def pow_digest(payload: bytes, nonce: int) -> Digest:
    return hash_value([payload, nonce])


def pow_search(payload: bytes, difficulty_bits: int, start_nonce: int = 0) -> int:
    """Least nonce >= start_nonce whose POW digest has difficulty_bits leading zero bits."""
    if not 0 <= difficulty_bits <= 64:
        raise CryptoError(f"difficulty out of range: {difficulty_bits}")
    if difficulty_bits == 0:
        return start_nonce
    bound = 1 << (256 - difficulty_bits)
    prefix = _pow_prefix(payload)
    nonce = start_nonce
    while nonce <= U64_MAX:
        attempt = prefix.copy()
        attempt.update(nonce.to_bytes(8, "big"))
        if int.from_bytes(attempt.digest(), "big") < bound:
            return nonce
        nonce += 1
    raise CryptoError("nonce space exhausted")


def pow_check(payload: bytes, nonce: int, difficulty_bits: int) -> bool:
    if difficulty_bits <= 0:
        return True
    if nonce < 0 or nonce > U64_MAX:
        return False
    return leading_zero_bits(pow_digest(payload, nonce)) >= difficulty_bits
