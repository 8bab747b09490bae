"""Bridge runtime: the DNS-facing UDP listener, the TCP handover listener and
the decoy web responder.

All protocol decisions live in :class:`~dnsmorph.session.BridgeCore`; this
module only moves bytes between sockets and the core.
"""

from __future__ import annotations

import asyncio
import errno
import html
import logging
import random
from typing import Optional

from . import dnswire, handover
from .config import TunnelConfig
from .innerproto import MockScrambleSuit, SessionKeys
from .session import BridgeCore, LocalAnswer, Reply

log = logging.getLogger(__name__)

FORWARD_TIMEOUT = 2.0
HELLO_TIMEOUT = 10.0
ECHO = "echo"

QUOTES = [
    "A journey of a thousand miles begins with a single step.",
    "Fortune favors the bold.",
    "The early bird catches the worm, but the second mouse gets the cheese.",
    "Do not count your chickens before they are hatched.",
    "He who laughs last laughs best.",
    "You will be hungry again in one hour.",
    "Patience is a tree whose root is bitter, but its fruit is very sweet.",
    "Well begun is half done.",
    "Today is a good day to try something new.",
    "A closed mouth gathers no feet.",
    "Every exit is an entry somewhere else.",
    "The best way to predict the future is to invent it.",
    "Nothing is so firmly believed as what we least know.",
    "Simplicity is the ultimate sophistication.",
    "An investment in knowledge pays the best interest.",
    "Time you enjoy wasting is not wasted time.",
]


class BindFailure(OSError):
    pass


def build_core(cfg: TunnelConfig, rng: random.Random) -> BridgeCore:
    inner = MockScrambleSuit(cfg.password, cfg.inner, random.Random(rng.getrandbits(64)), replay_cache=set())
    return BridgeCore(cfg.password, cfg.domain, inner, random.Random(rng.getrandbits(64)),
                      answer_ip=cfg.decoy_ip, ttl=cfg.ttl)


class _OneShot(asyncio.DatagramProtocol):
    def __init__(self, waiter: asyncio.Future):
        self.waiter = waiter

    def datagram_received(self, data, addr):
        if not self.waiter.done():
            self.waiter.set_result(data)

    def error_received(self, exc):
        if not self.waiter.done():
            self.waiter.set_exception(exc)


async def forward_query(query: bytes, resolver: tuple[str, int], timeout: float = FORWARD_TIMEOUT) -> Optional[bytes]:
    """Relay one query to a resolver; None on timeout or error."""
    loop = asyncio.get_running_loop()
    waiter = loop.create_future()
    try:
        transport, _ = await loop.create_datagram_endpoint(lambda: _OneShot(waiter), remote_addr=resolver)
    except OSError:
        return None
    try:
        transport.sendto(query)
        answer = await asyncio.wait_for(waiter, timeout)
    except (asyncio.TimeoutError, OSError):
        return None
    finally:
        transport.close()
    if len(answer) < 12 or answer[:2] != query[:2]:
        return None
    return answer


class _DnsPort(asyncio.DatagramProtocol):
    def __init__(self, bridge: "BridgeServer"):
        self.bridge = bridge
        self.transport: Optional[asyncio.DatagramTransport] = None

    def connection_made(self, transport):
        self.transport = transport

    def datagram_received(self, data, addr):
        self.bridge.handle_datagram(data, addr)


class BridgeServer:
    """Long-running bridge; ``await start()`` then ``await close()``."""

    def __init__(self, cfg: TunnelConfig, core: Optional[BridgeCore] = None, rng: Optional[random.Random] = None):
        self.cfg = cfg
        self.rng = rng or cfg.rng(salt=1)
        self.core = core or build_core(cfg, self.rng)
        self.udp: Optional[asyncio.DatagramTransport] = None
        self.tcp: Optional[asyncio.AbstractServer] = None
        self.http: Optional[asyncio.AbstractServer] = None
        self.rejected = 0
        self.tunnels = 0
        self._tasks: set[asyncio.Task] = set()

    # -- lifecycle ---------------------------------------------------------------

    async def start(self) -> "BridgeServer":
        loop = asyncio.get_running_loop()
        host = self.cfg.listen_host
        try:
            self.udp, _ = await loop.create_datagram_endpoint(lambda: _DnsPort(self), local_addr=(host, self.cfg.udp_port))
            self.tcp = await asyncio.start_server(self._on_tcp, host, self.cfg.tcp_port)
            if self.cfg.decoy_http is not None:
                self.http = await asyncio.start_server(self._on_http, host, self.cfg.decoy_http)
        except OSError as exc:
            await self.close()
            if exc.errno in (errno.EADDRINUSE, errno.EACCES):
                raise BindFailure(exc.errno, f"cannot bind on {host}: {exc.strerror}") from exc
            raise BindFailure(exc.errno, str(exc)) from exc
        log.info("dns on udp %s, handover on tcp %s", self.udp_address, self.tcp_address)
        return self

    async def close(self) -> None:
        if self.udp is not None:
            self.udp.close()
        for srv in (self.tcp, self.http):
            if srv is not None:
                srv.close()
                await srv.wait_closed()
        for task in list(self._tasks):
            task.cancel()

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Event().wait()
        finally:
            await self.close()

    @property
    def udp_address(self) -> tuple[str, int]:
        return self.udp.get_extra_info("sockname")[:2]

    @property
    def tcp_address(self) -> tuple[str, int]:
        return self.tcp.sockets[0].getsockname()[:2]

    @property
    def http_address(self) -> Optional[tuple[str, int]]:
        return self.http.sockets[0].getsockname()[:2] if self.http else None

    def _spawn(self, coro) -> None:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    # -- DNS -----------------------------------------------------------------

    def handle_datagram(self, data: bytes, addr) -> None:
        now = asyncio.get_running_loop().time()
        try:
            actions = self.core.on_datagram(data, now)
        except Exception:  # noqa: BLE001 - the DNS persona must keep answering
            log.exception("datagram handler failed")
            actions = [LocalAnswer(data)]
        for action in actions:
            if isinstance(action, Reply):
                self.udp.sendto(action.data, addr)
            elif isinstance(action, LocalAnswer):
                if self.cfg.local_dns == "forward":
                    self._spawn(self._forward(action.query, addr))
                else:
                    self._send_local(action.query, addr)

    def _send_local(self, query: bytes, addr) -> None:
        answer = self.core.local_answer(query)
        if answer is None:
            answer = dnswire.build_error_response(query, dnswire.RCODE_FORMERR)
        self.udp.sendto(answer, addr)

    async def _forward(self, query: bytes, addr) -> None:
        answer = await forward_query(query, self.cfg.forward_to)
        if answer is None:
            self._send_local(query, addr)
        elif not self.udp.is_closing():
            self.udp.sendto(answer, addr)

    # -- handover --------------------------------------------------------------

    def _claim(self, ciphertext: bytes) -> Optional[tuple[SessionKeys, handover.FrameOpener]]:
        found: dict = {}

        def check(keys: SessionKeys) -> bool:
            opener = handover.FrameOpener(keys.client_to_server)
            hello = opener.try_open(ciphertext)
            if hello is None or not hello.startswith(handover.HELLO_MAGIC):
                return False
            found["opener"] = opener
            return True

        keys = self.core.claim_handover(check)
        if keys is None:
            return None
        return keys, found["opener"]

    async def _on_tcp(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            first = await asyncio.wait_for(handover.read_frame(reader), HELLO_TIMEOUT)
        except (asyncio.TimeoutError, asyncio.IncompleteReadError, ConnectionError):
            first = None
        claimed = self._claim(first) if first is not None else None
        if claimed is None:
            self.rejected += 1
            log.info("handover rejected from %s", writer.get_extra_info("peername"))
            writer.close()
            return
        keys, opener = claimed
        self.tunnels += 1
        tunnel = handover.Tunnel(reader, writer, handover.FrameSealer(keys.server_to_client), opener)
        if self.cfg.upstream is None:
            await self._echo(tunnel)
            return
        try:
            up_reader, up_writer = await asyncio.open_connection(*self.cfg.upstream)
        except OSError as exc:
            log.warning("upstream %s unreachable: %s", self.cfg.upstream, exc)
            tunnel.close()
            return
        await handover.splice(up_reader, up_writer, tunnel)

    async def _echo(self, tunnel: handover.Tunnel) -> None:
        try:
            while True:
                data = await tunnel.recv()
                if not data:
                    break
                await tunnel.send(data)
        except (handover.FrameError, ConnectionError):
            pass
        finally:
            tunnel.close()

    # -- decoy web page ------------------------------------------------------------

    def fortune_page(self) -> bytes:
        quote = html.escape(self.rng.choice(QUOTES))
        return (f"<!DOCTYPE html>\n<html><head><title>Fortune</title></head>\n"
                f"<body><blockquote>{quote}</blockquote></body></html>\n").encode()

    async def _on_http(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            head = await asyncio.wait_for(reader.readuntil(b"\r\n\r\n"), HELLO_TIMEOUT)
        except (asyncio.TimeoutError, asyncio.IncompleteReadError, asyncio.LimitOverrunError, ConnectionError):
            writer.close()
            return
        method = head.split(b" ", 1)[0].upper()
        if method not in (b"GET", b"HEAD"):
            writer.write(b"HTTP/1.1 405 Method Not Allowed\r\nAllow: GET, HEAD\r\n"
                         b"Content-Length: 0\r\nConnection: close\r\n\r\n")
        else:
            body = self.fortune_page()
            writer.write(b"HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=utf-8\r\n"
                         + f"Content-Length: {len(body)}\r\n".encode()
                         + b"Connection: close\r\n\r\n"
                         + (body if method == b"GET" else b""))
        try:
            await writer.drain()
        except ConnectionError:
            pass
        writer.close()


async def serve(cfg: TunnelConfig) -> None:
    await BridgeServer(cfg.validate()).serve_forever()
