"""Encrypted byte stream used after the DNS handshake.

Frames on the TCP connection are ``2-byte big-endian length || AEAD
ciphertext``; each direction uses its own key and a counter nonce.  The
client's first frame is a padded hello the server uses to find which
completed handshake the connection belongs to.
"""

from __future__ import annotations

import asyncio
import os
import struct
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .innerproto import SessionKeys

MAX_FRAME = 0xFFFF
TAG_LEN = 16
MAX_PLAINTEXT = MAX_FRAME - TAG_LEN
HANDOVER_TIMEOUT = 10.0
HELLO_MAGIC = b"\x00hello"


class HandoverTimeout(ConnectionError):
    pass


class FrameError(ConnectionError):
    pass


def _nonce(counter: int) -> bytes:
    return counter.to_bytes(12, "big")


class FrameSealer:
    def __init__(self, key: bytes):
        self._aead = ChaCha20Poly1305(key)
        self._counter = 0

    def seal(self, plaintext: bytes) -> bytes:
        if len(plaintext) > MAX_PLAINTEXT:
            raise ValueError(f"frame payload of {len(plaintext)} bytes is too large")
        ct = self._aead.encrypt(_nonce(self._counter), plaintext, None)
        self._counter += 1
        return struct.pack("!H", len(ct)) + ct


class FrameOpener:
    def __init__(self, key: bytes):
        self._aead = ChaCha20Poly1305(key)
        self._counter = 0

    def open(self, ciphertext: bytes) -> bytes:
        try:
            pt = self._aead.decrypt(_nonce(self._counter), ciphertext, None)
        except InvalidTag:
            raise FrameError("frame failed authentication") from None
        self._counter += 1
        return pt

    def try_open(self, ciphertext: bytes) -> Optional[bytes]:
        try:
            return self.open(ciphertext)
        except FrameError:
            return None


def client_codecs(keys: SessionKeys) -> tuple[FrameSealer, FrameOpener]:
    return FrameSealer(keys.client_to_server), FrameOpener(keys.server_to_client)


def server_codecs(keys: SessionKeys) -> tuple[FrameSealer, FrameOpener]:
    return FrameSealer(keys.server_to_client), FrameOpener(keys.client_to_server)


def make_hello() -> bytes:
    return HELLO_MAGIC + os.urandom(16 + os.urandom(1)[0] % 48)


async def read_frame(reader: asyncio.StreamReader) -> bytes:
    head = await reader.readexactly(2)
    (n,) = struct.unpack("!H", head)
    return await reader.readexactly(n)


class Tunnel:
    """Both halves of an established encrypted stream."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 sealer: FrameSealer, opener: FrameOpener):
        self.reader = reader
        self.writer = writer
        self.sealer = sealer
        self.opener = opener
        self.bytes_on_wire = 0

    async def send(self, data: bytes) -> None:
        for i in range(0, len(data), MAX_PLAINTEXT):
            frame = self.sealer.seal(data[i:i + MAX_PLAINTEXT])
            self.bytes_on_wire += len(frame)
            self.writer.write(frame)
        await self.writer.drain()

    async def recv(self) -> bytes:
        """Next chunk of plaintext; b"" once the peer closes."""
        try:
            ct = await read_frame(self.reader)
        except (asyncio.IncompleteReadError, ConnectionError):
            return b""
        self.bytes_on_wire += 2 + len(ct)
        return self.opener.open(ct)

    async def recv_exactly(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = await self.recv()
            if not chunk:
                raise asyncio.IncompleteReadError(bytes(buf), n)
            buf += chunk
        return bytes(buf)

    def close(self) -> None:
        self.writer.close()

    async def wait_closed(self) -> None:
        try:
            await self.writer.wait_closed()
        except ConnectionError:
            pass


async def connect(host: str, port: int, keys: SessionKeys, timeout: float = HANDOVER_TIMEOUT) -> Tunnel:
    """Client half of the handover: connect, send the hello, return the tunnel."""
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        raise HandoverTimeout(f"cannot reach {host}:{port}: {exc}") from exc
    sealer, opener = client_codecs(keys)
    tunnel = Tunnel(reader, writer, sealer, opener)
    await tunnel.send(make_hello())
    return tunnel


async def pump_plain_to_tunnel(reader: asyncio.StreamReader, tunnel: Tunnel, chunk: int = 16384) -> None:
    try:
        while True:
            data = await reader.read(chunk)
            if not data:
                break
            await tunnel.send(data)
    finally:
        if tunnel.writer.can_write_eof():
            tunnel.writer.write_eof()


async def pump_tunnel_to_plain(tunnel: Tunnel, writer: asyncio.StreamWriter) -> None:
    try:
        while True:
            data = await tunnel.recv()
            if not data:
                break
            writer.write(data)
            await writer.drain()
    except FrameError:
        pass
    finally:
        if writer.can_write_eof():
            writer.write_eof()


async def splice(reader: asyncio.StreamReader, writer: asyncio.StreamWriter, tunnel: Tunnel) -> None:
    """Relay a plaintext connection through the tunnel in both directions."""
    try:
        await asyncio.gather(pump_plain_to_tunnel(reader, tunnel), pump_tunnel_to_plain(tunnel, writer))
    except (ConnectionError, OSError):
        pass
    finally:
        tunnel.close()
        writer.close()
