"""Client runtime: drives a handshake over real UDP, then hands over to TCP."""

from __future__ import annotations

import asyncio
import logging
import random
import time
from dataclasses import dataclass
from typing import Optional

from . import handover
from .config import TunnelConfig
from .innerproto import MockScrambleSuit, SessionKeys
from .reliability import RttEstimator
from .session import ClientHandshake, ClientStats, HandshakeFailure

log = logging.getLogger(__name__)

HANDSHAKE_DEADLINE = 120.0
MIN_TIMEOUT = 0.1


@dataclass
class HandshakeResult:
    keys: Optional[SessionKeys]
    stats: ClientStats
    seconds: float
    failure: Optional[HandshakeFailure] = None
    tunnel: Optional[handover.Tunnel] = None
    hello_bytes: int = 0

    @property
    def success(self) -> bool:
        return self.keys is not None and self.failure is None

    @property
    def bandwidth(self) -> int:
        """Handshake-phase payload bytes in both directions, hello frame included."""
        return self.stats.bytes_sent + self.stats.bytes_received + self.hello_bytes


class _Inbox(asyncio.DatagramProtocol):
    def __init__(self):
        self.queue: asyncio.Queue[bytes] = asyncio.Queue()
        self.transport: Optional[asyncio.DatagramTransport] = None

    def connection_made(self, transport):
        self.transport = transport

    def datagram_received(self, data, addr):
        self.queue.put_nowait(data)

    def error_received(self, exc):
        # ICMP unreachable and friends; the retransmission timers cover it
        log.debug("udp error: %s", exc)


def new_handshake(cfg: TunnelConfig, rng: Optional[random.Random] = None) -> ClientHandshake:
    rng = rng or cfg.rng()
    inner = MockScrambleSuit(cfg.password, cfg.inner, random.Random(rng.getrandbits(64)))
    return ClientHandshake(cfg.password, cfg.domain, inner, random.Random(rng.getrandbits(64)),
                           rtt=RttEstimator(min_timeout=MIN_TIMEOUT), pacing=cfg.pacing)


async def run_handshake(cfg: TunnelConfig, rng: Optional[random.Random] = None,
                        deadline: float = HANDSHAKE_DEADLINE) -> HandshakeResult:
    """Run one DNS-carried handshake against ``cfg.query_target``."""
    loop = asyncio.get_running_loop()
    hs = new_handshake(cfg, rng)
    transport, inbox = await loop.create_datagram_endpoint(_Inbox, remote_addr=cfg.query_target)
    started = time.perf_counter()
    give_up = loop.time() + deadline
    try:
        for wire in hs.start(loop.time()):
            transport.sendto(wire)
        while not hs.done:
            now = loop.time()
            if now >= give_up:
                hs.abort("timeout", "handshake deadline exceeded")
                break
            due = hs.next_deadline()
            wait = min(give_up, due if due is not None else give_up) - now
            try:
                data = await asyncio.wait_for(inbox.queue.get(), max(wait, 0.0))
            except asyncio.TimeoutError:
                out = hs.on_timer(loop.time())
            else:
                out = hs.on_datagram(data, loop.time())
            for wire in out:
                transport.sendto(wire)
    finally:
        transport.close()
    return HandshakeResult(hs.keys, hs.stats, time.perf_counter() - started, hs.failure)


async def open_tunnel(cfg: TunnelConfig, rng: Optional[random.Random] = None) -> HandshakeResult:
    """Handshake, then connect the TCP data channel.  ``result.tunnel`` is set on success."""
    result = await run_handshake(cfg, rng)
    if not result.success:
        return result
    try:
        tunnel = await handover.connect(cfg.server_host, cfg.tcp_port, result.keys)
    except handover.HandoverTimeout as exc:
        result.failure = HandshakeFailure("handover", str(exc))
        return result
    result.tunnel = tunnel
    result.hello_bytes = tunnel.bytes_on_wire
    return result


async def serve_local(cfg: TunnelConfig, ready: Optional[asyncio.Event] = None) -> None:
    """Accept plaintext TCP on ``cfg.local_port``; each connection gets its own tunnel."""

    async def on_conn(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        result = await open_tunnel(cfg)
        if result.tunnel is None:
            log.warning("handshake failed: %s", result.failure)
            writer.close()
            return
        log.info("tunnel up in %.3f s, %d handshake bytes", result.seconds, result.bandwidth)
        await handover.splice(reader, writer, result.tunnel)

    server = await asyncio.start_server(on_conn, "127.0.0.1", cfg.local_port)
    log.info("local listener on %s", ", ".join(str(s.getsockname()) for s in server.sockets))
    if ready is not None:
        ready.set()
    async with server:
        await server.serve_forever()
