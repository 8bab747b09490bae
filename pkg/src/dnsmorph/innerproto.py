"""The handshake carried by the DNS layer.

:class:`InnerHandshake` is what the transport needs from a probe-resistant
protocol.  :class:`MockScrambleSuit` reproduces the *shape* of ScrambleSuit's
UniformDH handshake (public key, random padding, mark, MAC, ticket) with
HMAC authentication in place of the real key agreement.  Message sizes are
what drive packet counts, so those are kept faithful; the math is not.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
import struct
from dataclasses import dataclass
from typing import Optional, Protocol, Union

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

SHORT_PAD_MAX = 100
ORIGINAL_PAD_MAX = 1308


@dataclass(frozen=True)
class MockScrambleSuitConfig:
    pad_max: int = SHORT_PAD_MAX
    # A UniformDH public value is as long as the group modulus; 1536 bits
    # (RFC 3526 group 5) gives 192 bytes.
    pubkey_len: int = 192
    mark_len: int = 16
    mac_len: int = 32
    ticket_len: int = 112

    def __post_init__(self):
        if self.pad_max < 0:
            raise ValueError("pad_max must be non-negative")
        if not 1 <= self.mark_len <= 32 or not 1 <= self.mac_len <= 32:
            raise ValueError("mark and MAC lengths must be 1..32 bytes")

    @property
    def client_min(self) -> int:
        return self.pubkey_len + self.mark_len + self.mac_len

    @property
    def client_max(self) -> int:
        return self.client_min + self.pad_max


@dataclass(frozen=True)
class SessionKeys:
    client_to_server: bytes
    server_to_client: bytes


@dataclass(frozen=True)
class Accept:
    reply: bytes
    keys: SessionKeys
    ticket: Optional[bytes] = None


@dataclass(frozen=True)
class Reject:
    reason: str = ""


Outcome = Union[Accept, Reject]


class InnerHandshake(Protocol):
    def client_first(self) -> bytes: ...

    def server_respond(self, msg: bytes) -> Outcome: ...

    def client_finish(self, msg: bytes) -> Outcome: ...


def _hmac(key: bytes, *parts: bytes) -> bytes:
    h = hmac.new(key, digestmod=hashlib.sha256)
    for p in parts:
        h.update(p)
    return h.digest()


def derive_session_keys(material: bytes) -> SessionKeys:
    return SessionKeys(
        client_to_server=_hmac(material, b"dnsmorph client-to-server"),
        server_to_client=_hmac(material, b"dnsmorph server-to-client"),
    )


def _keystream_xor(key: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CTR(b"\x00" * 16)).encryptor()
    return enc.update(data) + enc.finalize()


def _random_bytes(rng: random.Random, n: int) -> bytes:
    return rng.randbytes(n) if n else b""


def mock_client_first(password: bytes, rng: random.Random, cfg: MockScrambleSuitConfig) -> bytes:
    """X || pad || mark || mac."""
    x = _random_bytes(rng, cfg.pubkey_len)
    pad = _random_bytes(rng, rng.randint(0, cfg.pad_max))
    mark = _hmac(password, x)[:cfg.mark_len]
    mac = _hmac(password, x, pad, mark)[:cfg.mac_len]
    return x + pad + mark + mac


def _locate(password: bytes, msg: bytes, cfg: MockScrambleSuitConfig, *bound: bytes) -> Optional[tuple[bytes, int]]:
    """Find the mark after the public value and check the MAC that follows it.

    Returns (public value, offset just past the MAC) or None.
    """
    if len(msg) < cfg.client_min:
        return None
    pub = msg[:cfg.pubkey_len]
    mark = _hmac(password, pub)[:cfg.mark_len]
    pos = msg.find(mark, cfg.pubkey_len)
    while pos != -1:
        end = pos + cfg.mark_len + cfg.mac_len
        if end <= len(msg):
            want = _hmac(password, *bound, msg[:pos + cfg.mark_len])[:cfg.mac_len]
            if hmac.compare_digest(want, msg[pos + cfg.mark_len:end]):
                return pub, end
        pos = msg.find(mark, pos + 1)
    return None


def mock_server_respond(password: bytes, msg: bytes, rng: random.Random, cfg: MockScrambleSuitConfig,
                        replay_cache: Optional[set] = None) -> Outcome:
    """Authenticate the client message and build Y || pad || mark || mac || ticket record.

    ``replay_cache`` (a set of MACs already seen) makes a repeated client
    message fail the way ScrambleSuit's replay table does; without it a
    replay is accepted.
    """
    found = _locate(password, msg, cfg)
    if found is None or found[1] != len(msg):
        return Reject("no valid mark/MAC")
    x, _ = found
    client_mac = msg[-cfg.mac_len:]
    if replay_cache is not None:
        if client_mac in replay_cache:
            return Reject("replayed handshake")
        replay_cache.add(client_mac)

    y = _random_bytes(rng, cfg.pubkey_len)
    keys = derive_session_keys(_hmac(password, x, y))
    pad = _random_bytes(rng, rng.randint(0, cfg.pad_max))
    mark = _hmac(password, y)[:cfg.mark_len]
    mac = _hmac(password, x, y, pad, mark)[:cfg.mac_len]

    ticket = _random_bytes(rng, cfg.ticket_len)
    ticket_pad = _random_bytes(rng, rng.randint(0, cfg.pad_max))
    body = _keystream_xor(keys.server_to_client, struct.pack("!H", len(ticket)) + ticket + ticket_pad)
    record = body + _hmac(keys.server_to_client, body)
    return Accept(y + pad + mark + mac + record, keys, ticket)


def mock_client_finish(password: bytes, first: bytes, reply: bytes, cfg: MockScrambleSuitConfig) -> Outcome:
    x = first[:cfg.pubkey_len]
    found = _locate(password, reply, cfg, x)
    if found is None:
        return Reject("no valid mark/MAC in server reply")
    y, end = found
    keys = derive_session_keys(_hmac(password, x, y))
    record = reply[end:]
    body, tag = record[:-32], record[-32:]
    if len(record) < 34 or not hmac.compare_digest(tag, _hmac(keys.server_to_client, body)):
        return Reject("ticket record failed authentication")
    plain = _keystream_xor(keys.server_to_client, body)
    (n,) = struct.unpack_from("!H", plain)
    if 2 + n > len(plain):
        return Reject("ticket record length out of range")
    return Accept(b"", keys, plain[2:2 + n])


class MockScrambleSuit:
    """Stateful wrapper implementing :class:`InnerHandshake` for one side.

    The server side may be shared by every session of a bridge; it only
    keeps the replay cache.
    """

    def __init__(self, password: bytes, cfg: MockScrambleSuitConfig = MockScrambleSuitConfig(),
                 rng: Optional[random.Random] = None, replay_cache: Optional[set] = None):
        if not password:
            raise ValueError("password must not be empty")
        self.password = password
        self.cfg = cfg
        self.rng = rng if rng is not None else random.Random(os.urandom(16))
        self.replay_cache = replay_cache
        self._first: Optional[bytes] = None
        self.accepts = 0
        self.rejects = 0

    def client_first(self) -> bytes:
        self._first = mock_client_first(self.password, self.rng, self.cfg)
        return self._first

    def server_respond(self, msg: bytes) -> Outcome:
        out = mock_server_respond(self.password, msg, self.rng, self.cfg, self.replay_cache)
        if isinstance(out, Accept):
            self.accepts += 1
        else:
            self.rejects += 1
        return out

    def client_finish(self, msg: bytes) -> Outcome:
        if self._first is None:
            return Reject("client_first was never sent")
        return mock_client_finish(self.password, self._first, msg, self.cfg)
