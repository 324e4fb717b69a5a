"""Cryptographic primitives shared by the KMS and vKMS services.

* :func:`otp_transform`: one-time-pad XOR.
* :func:`kem_keygen` / :func:`kem_encapsulate` / :func:`kem_decapsulate`:
  a small KEM abstraction over ML-KEM-768 and a deterministic toy KEM used
  by tests.
* :func:`kdf_combine`: HMAC-SHA256 extract-then-expand over an ordered,
  length-prefixed list of labelled secrets with the session context bound
  into the info string.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import os
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from cryptography.hazmat.primitives.asymmetric import mlkem

from .errors import (
    DuplicateLabel,
    EmptyInputs,
    LengthMismatch,
    MalformedCiphertext,
    MalformedPublicKey,
    MalformedSecretKey,
    UnsupportedSuite,
)
from .levels import SecurityLevel

RandBytes = Callable[[int], bytes]

HASH_LEN = 32
KDF_SALT = b"qsafenet/kdf-combine/v1"
DEFAULT_KEY_BITS = 256


@dataclass(frozen=True)
class KeyMaterial:
    """Raw symmetric key bytes. ``repr`` never shows the bytes."""

    data: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if not isinstance(self.data, (bytes, bytearray)):
            raise TypeError("KeyMaterial.data must be bytes")
        if len(self.data) == 0:
            raise ValueError("KeyMaterial must be non-empty")
        object.__setattr__(self, "data", bytes(self.data))

    @property
    def length_bits(self) -> int:
        return 8 * len(self.data)

    def b64(self) -> str:
        return base64.b64encode(self.data).decode("ascii")

    @classmethod
    def from_b64(cls, text: str) -> "KeyMaterial":
        return cls(base64.b64decode(text))

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class KemSuite:
    suite_id: str
    public_key_len: int
    secret_key_len: int
    ciphertext_len: int
    shared_secret_len: int


ML_KEM_768 = KemSuite("ML_KEM_768", public_key_len=1184, secret_key_len=64, ciphertext_len=1088, shared_secret_len=32)
TOY_KEM = KemSuite("TOY_KEM", public_key_len=256, secret_key_len=32, ciphertext_len=256, shared_secret_len=32)

SUITES: dict[str, KemSuite] = {s.suite_id: s for s in (ML_KEM_768, TOY_KEM)}


def get_suite(suite: "str | KemSuite") -> KemSuite:
    name = suite.suite_id if isinstance(suite, KemSuite) else str(suite)
    try:
        return SUITES[name]
    except KeyError:
        raise UnsupportedSuite(f"unsupported KEM suite {name!r}") from None


@dataclass(frozen=True)
class SecretInput:
    label: str
    material: KeyMaterial

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("SecretInput label must be non-empty")


@dataclass(frozen=True)
class DerivationContext:
    session_id: str
    initiator_app: str
    target_app: str
    level: SecurityLevel
    out_len_bits: int = DEFAULT_KEY_BITS
    purpose: str = "session-key"

    def __post_init__(self) -> None:
        if self.out_len_bits <= 0 or self.out_len_bits % 8:
            raise ValueError("out_len_bits must be a positive multiple of 8")

    def info(self) -> bytes:
        parts = [
            self.purpose.encode(),
            str(self.session_id).encode(),
            self.initiator_app.encode(),
            self.target_app.encode(),
            SecurityLevel.parse(self.level).name.encode(),
        ]
        return b"".join(_lp16(p) for p in parts) + struct.pack(">I", self.out_len_bits)


def seeded_randbytes(seed: int) -> RandBytes:
    """Deterministic byte source for tests and reproducible runs. Not a CSPRNG."""
    rng = random.Random(seed)
    return rng.randbytes


def zeroize(buf: bytearray) -> None:
    for i in range(len(buf)):
        buf[i] = 0


# ---------------------------------------------------------------- OTP

def otp_transform(data: KeyMaterial, pad: KeyMaterial) -> KeyMaterial:
    if data.length_bits != pad.length_bits:
        raise LengthMismatch(f"data is {data.length_bits} bits, pad is {pad.length_bits} bits")
    n = len(data.data)
    x = int.from_bytes(data.data, "big") ^ int.from_bytes(pad.data, "big")
    return KeyMaterial(x.to_bytes(n, "big"))


# ---------------------------------------------------------------- KEM

# RFC 3526 group 14 (2048-bit MODP), generator 2.
_TOY_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
_TOY_G = 2


def _toy_secret(pk: bytes, ct: bytes, shared: int) -> bytes:
    return hashlib.sha256(b"toy-kem" + pk + ct + shared.to_bytes(256, "big")).digest()


def _check_toy_element(blob: bytes, exc: type) -> int:
    value = int.from_bytes(blob, "big")
    if not 1 < value < _TOY_P - 1:
        raise exc("group element out of range")
    return value


def kem_keygen(suite: "str | KemSuite", randbytes: RandBytes | None = None) -> tuple[bytes, bytearray]:
    """Return ``(public_key, secret_key)``; the secret key is a mutable buffer so callers can zeroize it."""
    s = get_suite(suite)
    randbytes = randbytes or os.urandom
    if s is ML_KEM_768:
        seed = randbytes(64)
        sk = mlkem.MLKEM768PrivateKey.from_seed_bytes(seed)
        return sk.public_key().public_bytes_raw(), bytearray(seed)
    x_bytes = randbytes(32)
    x = int.from_bytes(x_bytes, "big") | 1
    pk = pow(_TOY_G, x, _TOY_P).to_bytes(256, "big")
    return pk, bytearray(x.to_bytes(32, "big"))


def kem_encapsulate(
    suite: "str | KemSuite", public_key: bytes, randbytes: RandBytes | None = None
) -> tuple[bytes, KeyMaterial]:
    """Return ``(ciphertext, shared_secret)``.

    ML-KEM encapsulation draws its coins from the OS; ``randbytes`` only
    drives the toy suite.
    """
    s = get_suite(suite)
    if len(public_key) != s.public_key_len:
        raise MalformedPublicKey(f"{s.suite_id} public key must be {s.public_key_len} octets, got {len(public_key)}")
    if s is ML_KEM_768:
        try:
            pk = mlkem.MLKEM768PublicKey.from_public_bytes(bytes(public_key))
        except ValueError as exc:
            raise MalformedPublicKey(str(exc)) from None
        shared, ct = pk.encapsulate()
        return ct, KeyMaterial(shared)
    y = _check_toy_element(public_key, MalformedPublicKey)
    randbytes = randbytes or os.urandom
    r = int.from_bytes(randbytes(32), "big") | 1
    ct = pow(_TOY_G, r, _TOY_P).to_bytes(256, "big")
    return ct, KeyMaterial(_toy_secret(bytes(public_key), ct, pow(y, r, _TOY_P)))


def kem_decapsulate(suite: "str | KemSuite", secret_key: "bytes | bytearray", ciphertext: bytes) -> KeyMaterial:
    s = get_suite(suite)
    if len(ciphertext) != s.ciphertext_len:
        raise MalformedCiphertext(f"{s.suite_id} ciphertext must be {s.ciphertext_len} octets, got {len(ciphertext)}")
    if len(secret_key) != s.secret_key_len:
        raise MalformedSecretKey(f"{s.suite_id} secret key must be {s.secret_key_len} octets")
    if s is ML_KEM_768:
        sk = mlkem.MLKEM768PrivateKey.from_seed_bytes(bytes(secret_key))
        try:
            return KeyMaterial(sk.decapsulate(bytes(ciphertext)))
        except ValueError as exc:
            raise MalformedCiphertext(str(exc)) from None
    x = int.from_bytes(secret_key, "big")
    c = _check_toy_element(ciphertext, MalformedCiphertext)
    pk = pow(_TOY_G, x, _TOY_P).to_bytes(256, "big")
    return KeyMaterial(_toy_secret(pk, bytes(ciphertext), pow(c, x, _TOY_P)))


# ---------------------------------------------------------------- KDF

def _lp16(b: bytes) -> bytes:
    return struct.pack(">H", len(b)) + b


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    return hmac.new(salt or bytes(HASH_LEN), ikm, hashlib.sha256).digest()


def hkdf_expand(prk: bytes, info: bytes, length: int) -> bytes:
    if length > 255 * HASH_LEN:
        raise ValueError("requested output too long")
    out = b""
    block = b""
    counter = 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:length]


def encode_inputs(inputs: Iterable[SecretInput]) -> bytes:
    # label: 2-octet length prefix; material: 4-octet length prefix
    return b"".join(
        _lp16(i.label.encode()) + struct.pack(">I", len(i.material.data)) + i.material.data for i in inputs
    )


def kdf_combine(inputs: Sequence[SecretInput], ctx: DerivationContext) -> KeyMaterial:
    if not inputs:
        raise EmptyInputs("kdf_combine needs at least one input")
    labels = [i.label for i in inputs]
    if len(set(labels)) != len(labels):
        raise DuplicateLabel(f"duplicate labels in {labels}")
    prk = hkdf_extract(KDF_SALT, encode_inputs(inputs))
    return KeyMaterial(hkdf_expand(prk, ctx.info(), ctx.out_len_bits // 8))


def key_confirmation_tag(key: KeyMaterial, session_id: str) -> str:
    """Hex HMAC tag letting two parties compare derived keys without revealing them."""
    return hmac.new(key.data, b"key-confirm|" + str(session_id).encode(), hashlib.sha256).hexdigest()
