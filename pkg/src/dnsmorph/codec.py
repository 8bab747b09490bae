"""DNS-label-safe Base32 text codec and fragmentation.

The alphabet is RFC 4648 Base32 lowercased, with the padding character
``=`` replaced by the digit ``1``.  Everything emitted is a valid DNS label
character, and decoding ignores letter case so a resolver (or a censor)
flipping case in transit does not corrupt the payload.
"""

from __future__ import annotations

import base64
import binascii
import random
import re

MIN_FRAGMENT = 20
MAX_FRAGMENT = 50

ALPHABET = "abcdefghijklmnopqrstuvwxyz234567"
PAD_CHAR = "1"

_ENCODE_MAP = str.maketrans("ABCDEFGHIJKLMNOPQRSTUVWXYZ=", "abcdefghijklmnopqrstuvwxyz1")
_DECODE_MAP = str.maketrans("1", "=")
_VALID = re.compile(r"[A-Za-z2-7]*1*")
_OUT_OF_ALPHABET = re.compile(r"[^A-Za-z2-71]")


class CodecError(ValueError):
    pass


class CharacterOutOfAlphabet(CodecError):
    pass


class BadPaddingStructure(CodecError):
    pass


class EmptyInput(CodecError):
    pass


def encode_b32(data: bytes) -> str:
    return base64.b32encode(bytes(data)).decode("ascii").translate(_ENCODE_MAP)


def decode_b32(text: str) -> bytes:
    """Inverse of :func:`encode_b32`, accepting either letter case."""
    bad = _OUT_OF_ALPHABET.search(text)
    if bad:
        raise CharacterOutOfAlphabet(f"character {bad.group()!r} at offset {bad.start()}")
    if not _VALID.fullmatch(text):
        raise BadPaddingStructure("padding character before data")
    try:
        return base64.b32decode(text.upper().translate(_DECODE_MAP))
    except binascii.Error as exc:
        raise BadPaddingStructure(str(exc)) from exc


def is_encoded_text(text: str) -> bool:
    return _VALID.fullmatch(text) is not None


def fragment(text: str, rng: random.Random) -> list[str]:
    """Chop encoded text into pieces of 20-50 characters.

    Every piece except the last has a length drawn uniformly from
    ``[MIN_FRAGMENT, MAX_FRAGMENT]``; the last one takes whatever is left
    (1-50 characters).
    """
    if not text:
        raise EmptyInput("cannot fragment empty text")
    out = []
    pos = 0
    while pos < len(text):
        size = rng.randint(MIN_FRAGMENT, MAX_FRAGMENT)
        out.append(text[pos:pos + size])
        pos += size
    return out


def reassemble(fragments: list[str]) -> str:
    return "".join(fragments)
