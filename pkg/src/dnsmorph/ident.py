"""Per-packet sealing of the (identity, session) prefix.

Each label starts with five characters holding a 16-bit identity and an
8-bit session ID, AES-128-CTR encrypted under a key and IV derived from the
shared password and the fragment text that follows the prefix.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from typing import NamedTuple

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .codec import ALPHABET, CharacterOutOfAlphabet

PREFIX_LEN = 5

CLIENT = 0
SERVER = 1

_ALPHABET_INDEX = {c: i for i, c in enumerate(ALPHABET)}


class PacketPrefix(NamedTuple):
    identity: int
    session: int


def derive_key_iv(password: bytes, x: int, fragment: str) -> tuple[bytes, bytes]:
    """Key || IV = HMAC-SHA-256(password, X || fragment), split 16/16.

    ``x`` is 0 for client-originated packets and 1 for server-originated
    ones; it is serialized as one ASCII digit.
    """
    if x not in (CLIENT, SERVER):
        raise ValueError(f"direction tag must be 0 or 1, got {x!r}")
    digest = hmac.new(password, str(x).encode("ascii") + fragment.encode("ascii"), hashlib.sha256).digest()
    return digest[:16], digest[16:]


def _ctr(key: bytes, iv: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    return enc.update(data) + enc.finalize()


def _b32_24bit(value: bytes) -> str:
    # 24 bits -> 5 chars; the final char carries 4 bits plus a zero bit.
    n = int.from_bytes(value, "big") << 1
    return "".join(ALPHABET[(n >> shift) & 31] for shift in (20, 15, 10, 5, 0))


def _unb32_24bit(text: str) -> bytes:
    n = 0
    for ch in text.lower():
        try:
            n = (n << 5) | _ALPHABET_INDEX[ch]
        except KeyError:
            raise CharacterOutOfAlphabet(f"character {ch!r} not allowed in a prefix") from None
    return (n >> 1).to_bytes(3, "big")


def seal_prefix(password: bytes, x: int, fragment: str, prefix: PacketPrefix) -> str:
    identity, session = prefix
    if not 0 <= identity <= 0xFFFF:
        raise ValueError(f"identity {identity} does not fit in 16 bits")
    if not 0 <= session <= 0xFF:
        raise ValueError(f"session {session} does not fit in 8 bits")
    key, iv = derive_key_iv(password, x, fragment)
    return _b32_24bit(_ctr(key, iv, struct.pack("!HB", identity, session)))


def open_prefix(password: bytes, x: int, fragment: str, prefix5: str) -> PacketPrefix:
    """Decrypt a prefix.  Any five alphabet characters open to *some* value."""
    if len(prefix5) != PREFIX_LEN:
        raise ValueError(f"prefix must be {PREFIX_LEN} characters")
    key, iv = derive_key_iv(password, x, fragment)
    identity, session = struct.unpack("!HB", _ctr(key, iv, _unb32_24bit(prefix5)))
    return PacketPrefix(identity, session)
