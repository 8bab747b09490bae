"""Handshake orchestration for both ends of the DNS carrier.

Both machines are sans-IO: they take datagrams and clock readings and
return datagrams to send.  The same objects run under the deterministic
simulator and under the asyncio runtime in :mod:`dnsmorph.client` and
:mod:`dnsmorph.bridge`.

Client flow: encode the inner protocol's first message, fragment it, seal
each fragment with identities ``L, L+1, ...`` (``L`` = encoded length) and
push the queries through a window of four.  Once every data query is
acknowledged, send dummy queries one at a time; each is answered by a
CNAME carrying the next fragment of the server's message.

Server flow: buffer fragments per session ID until a contiguous identity
run starting at ``s`` has exactly ``s`` characters, hand the reassembled
bytes to the inner protocol, then answer later queries of the session with
data responses.  Anything that is not a live protocol packet gets an
ordinary DNS answer.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import codec, dnswire
from .codec import ALPHABET, CodecError
from .ident import CLIENT, PREFIX_LEN, SERVER, PacketPrefix, open_prefix, seal_prefix
from .innerproto import Accept, InnerHandshake, SessionKeys
from .reliability import (
    MAX_SEND_ATTEMPTS,
    RttEstimator,
    SendWindow,
    StopAndWait,
    WindowEntry,
)

log = logging.getLogger(__name__)

MAX_IDENTITY = 0xFFFF
SESSION_IDLE_TIMEOUT = 60.0
# Headroom reserved for dummy identities when refusing oversized handshakes.
DUMMY_HEADROOM = 4096

CLIENT_SEND = "client_send"
CLIENT_RECEIVE = "client_receive"
SERVER_RECEIVE = "server_receive"
SERVER_SEND = "server_send"
HANDOVER = "handover"
FAILED = "failed"


class HandshakeFailure(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class IdentityOverflow(ValueError):
    pass


def random_filler(rng: random.Random) -> str:
    n = rng.randint(codec.MIN_FRAGMENT, codec.MAX_FRAGMENT)
    return "".join(rng.choice(ALPHABET) for _ in range(n))


def make_payload(password: bytes, x: int, fragment: str, identity: int, session: int) -> str:
    return seal_prefix(password, x, fragment, PacketPrefix(identity, session)) + fragment


def split_label(label: str) -> Optional[tuple[str, str]]:
    """Lowercased (prefix, fragment) if the label could be a protocol payload."""
    label = label.lower()
    prefix, frag = label[:PREFIX_LEN], label[PREFIX_LEN:]
    if len(prefix) != PREFIX_LEN or not 1 <= len(frag) <= codec.MAX_FRAGMENT:
        return None
    if any(c not in ALPHABET for c in prefix) or not codec.is_encoded_text(frag):
        return None
    return prefix, frag


def dummy_label(wire: bytes) -> str:
    return dnswire.parse_query(wire).name.split(".", 1)[0]


def find_complete_run(buffer: dict[int, str]) -> Optional[tuple[int, int]]:
    """Find identities ``s, s+1, ...`` whose fragments total exactly ``s`` chars.

    Returns ``(s, count)`` or None.  Garbage entries elsewhere in the buffer
    do not matter as long as they do not sit inside the run.
    """
    for start in sorted(buffer):
        total = 0
        ident = start
        while ident in buffer and total < start:
            total += len(buffer[ident])
            ident += 1
        if total == start:
            return start, ident - start
    return None


@dataclass
class ClientStats:
    datagrams_sent: int = 0
    datagrams_received: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    max_outstanding: int = 0
    data_packets: int = 0
    dummies: int = 0
    resends: int = 0


class ClientHandshake:
    """Client side of one DNS-carried handshake.

    ``on_*`` methods return the datagrams to transmit.  ``phase`` ends in
    ``handover`` (``keys`` set) or ``failed`` (``failure`` set).
    """

    def __init__(self, password: bytes, domain: str, inner: InnerHandshake, rng: random.Random,
                 session_id: Optional[int] = None, rtt: Optional[RttEstimator] = None,
                 pacing: float = 0.0):
        self.password = password
        self.domain = dnswire.validate_domain(domain)
        self.inner = inner
        self.rng = rng
        self.session_id = session_id if session_id is not None else rng.randrange(256)
        self.rtt = rtt or RttEstimator()
        self.pacing = pacing
        self.phase = CLIENT_SEND
        self.keys: Optional[SessionKeys] = None
        self.ticket: Optional[bytes] = None
        self.failure: Optional[HandshakeFailure] = None
        self.stats = ClientStats()

        self.sent_text = ""
        self.received_text = ""
        self._pending: list[tuple[int, str]] = []
        self._window = SendWindow()
        self.next_identity = 0

        self._saw = StopAndWait()
        self._dummy: Optional[WindowEntry] = None
        self._dummy_deadline: Optional[float] = None
        self._dummy_due: Optional[float] = None
        self._server_total: Optional[int] = None
        self._server_frags: list[str] = []

    # -- helpers -------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.phase in (HANDOVER, FAILED)

    def _qid(self) -> int:
        return self.rng.randrange(0x10000)

    def _fail(self, reason: str, detail: str = "") -> list[bytes]:
        self.phase = FAILED
        self.failure = HandshakeFailure(reason, detail)
        self._window.entries.clear()
        self._dummy = None
        log.debug("client session %d failed: %s", self.session_id, self.failure)
        return []

    def abort(self, reason: str, detail: str = "") -> None:
        """Give up from outside, e.g. on a wall-clock deadline."""
        if not self.done:
            self._fail(reason, detail)

    def _emit(self, wire: bytes) -> bytes:
        self.stats.datagrams_sent += 1
        self.stats.bytes_sent += len(wire)
        return wire

    # -- send phase ------------------------------------------------------------

    def start(self, now: float) -> list[bytes]:
        first = self.inner.client_first()
        text = codec.encode_b32(first)
        frags = codec.fragment(text, self.rng)
        total = len(text)
        if total + len(frags) + DUMMY_HEADROOM > MAX_IDENTITY:
            raise IdentityOverflow(f"encoded handshake of {total} chars leaves no identity headroom")
        self.sent_text = text
        self._pending = [(total + i, f) for i, f in enumerate(frags)][::-1]
        self.next_identity = total + len(frags)
        self.stats.data_packets = len(frags)
        return self._fill_window(now)

    def _fill_window(self, now: float) -> list[bytes]:
        out = []
        while self._pending and not self._window.full:
            identity, frag = self._pending.pop()
            payload = make_payload(self.password, CLIENT, frag, identity, self.session_id)
            qid = self._qid()
            wire = dnswire.build_query(payload, self.domain, qid)
            self._window.on_send(WindowEntry(qid, wire, identity, sent_at=now))
            out.append(self._emit(wire))
        self.stats.max_outstanding = max(self.stats.max_outstanding, len(self._window.entries))
        if not self._pending and not self._window.entries:
            self.phase = CLIENT_RECEIVE
            out += self._schedule_dummy(now)
        return out

    def _requery(self, entry: WindowEntry, now: float) -> bytes:
        # New qid means a new header; the question stays identical.
        wire = entry.qid.to_bytes(2, "big") + entry.wire[2:]
        entry.wire = wire
        entry.sent_at = now
        self.stats.resends += 1
        return self._emit(wire)

    def _on_ack(self, data: bytes, now: float) -> list[bytes]:
        try:
            msg = dnswire.parse_message(data)
        except dnswire.DnsWireError:
            return []
        entry = self._window.find(msg.qid)
        if entry is None or not msg.is_response or not msg.questions:
            return []
        sent_name = dnswire.parse_message(entry.wire).questions[0].name
        if msg.questions[0].name.lower() != sent_name.lower():
            return []
        was_first_try = entry.attempts == 1
        acked, resend = self._window.on_ack(msg.qid, self._qid)
        if was_first_try:
            self.rtt.update(max(now - acked.sent_at, 1e-6))
        out = []
        if resend is not None:
            if resend.attempts > MAX_SEND_ATTEMPTS:
                return self._fail("timeout", f"identity {resend.identity} unacknowledged")
            out.append(self._requery(resend, now))
        return out + self._fill_window(now)

    # -- receive phase -----------------------------------------------------------

    def _schedule_dummy(self, now: float) -> list[bytes]:
        if self.pacing > 0:
            self._dummy_due = now + self.pacing
            return []
        return self._send_dummy(now)

    def make_dummy(self) -> str:
        if self.next_identity > MAX_IDENTITY:
            raise IdentityOverflow("identity space exhausted")
        filler = random_filler(self.rng)
        payload = make_payload(self.password, CLIENT, filler, self.next_identity, self.session_id)
        self.next_identity += 1
        return payload

    def _send_dummy(self, now: float) -> list[bytes]:
        self._dummy_due = None
        try:
            payload = self.make_dummy()
        except IdentityOverflow as exc:
            return self._fail("transport", str(exc))
        qid = self._qid()
        wire = dnswire.build_query(payload, self.domain, qid)
        self._dummy = WindowEntry(qid, wire, self.next_identity - 1, sent_at=now)
        self._saw.on_send()
        self._dummy_deadline = now + self.rtt.timeout
        self.stats.dummies += 1
        return [self._emit(wire)]

    def _accept_server_fragment(self, resp: dnswire.ParsedResponse) -> bool:
        if resp.domain is None or resp.domain.lower() != self.domain.lower():
            return False
        parts = split_label(resp.payload_label or "")
        if parts is None:
            return False
        prefix, frag = parts
        identity, session = open_prefix(self.password, SERVER, frag, prefix)
        if session != self.session_id:
            return False
        if self._server_total is None:
            if identity < len(frag):
                return False
            self._server_total = identity
        elif identity != self._server_total + len(self._server_frags):
            return False
        self._server_frags.append(frag)
        return True

    def _on_response(self, data: bytes, now: float) -> list[bytes]:
        dummy = self._dummy
        if dummy is None:
            return []
        try:
            resp = dnswire.parse_response(data)
        except dnswire.DnsWireError:
            return []
        if resp.qid != dummy.qid or resp.kind != "data":
            return []
        if resp.name.lower() != dnswire.payload_name(dummy_label(dummy.wire), self.domain).lower():
            return []
        if not self._accept_server_fragment(resp):
            return []
        if self._saw.transmissions == 1:
            self.rtt.update(max(now - dummy.sent_at, 1e-6))
        self._saw.step("response_received")
        self._dummy = None
        self._dummy_deadline = None
        received = sum(len(f) for f in self._server_frags)
        if received < self._server_total:
            return self._schedule_dummy(now)
        if received > self._server_total:
            return self._fail("transport", "server sent more data than announced")
        return self._finish()

    def _finish(self) -> list[bytes]:
        self.received_text = codec.reassemble(self._server_frags)
        try:
            reply = codec.decode_b32(self.received_text)
        except CodecError as exc:
            return self._fail("transport", f"undecodable server data: {exc}")
        outcome = self.inner.client_finish(reply)
        if not isinstance(outcome, Accept):
            return self._fail("inner_reject", getattr(outcome, "reason", ""))
        self.keys = outcome.keys
        self.ticket = outcome.ticket
        self.phase = HANDOVER
        return []

    # -- events ----------------------------------------------------------------

    def on_datagram(self, data: bytes, now: float) -> list[bytes]:
        if self.done:
            return []
        self.stats.datagrams_received += 1
        self.stats.bytes_received += len(data)
        if self.phase == CLIENT_SEND:
            return self._on_ack(data, now)
        return self._on_response(data, now)

    def next_deadline(self) -> Optional[float]:
        if self.done:
            return None
        if self.phase == CLIENT_SEND:
            if not self._window.entries:
                return None
            return min(e.sent_at for e in self._window.entries) + self.rtt.timeout
        if self._dummy_due is not None:
            return self._dummy_due
        return self._dummy_deadline

    def on_timer(self, now: float) -> list[bytes]:
        if self.done:
            return []
        if self.phase == CLIENT_SEND:
            out = []
            for entry in list(self._window.entries):
                if entry.sent_at + self.rtt.timeout <= now:
                    if entry.attempts >= MAX_SEND_ATTEMPTS:
                        return self._fail("timeout", f"identity {entry.identity} unacknowledged")
                    self._window.rekey(entry, self._qid())
                    out.append(self._requery(entry, now))
            return out
        if self._dummy_due is not None:
            if now >= self._dummy_due:
                return self._send_dummy(now)
            return []
        if self._dummy_deadline is None or now < self._dummy_deadline:
            return []
        action = self._saw.step("timeout")
        if action == "fail":
            return self._fail("timeout", "no response after three transmissions")
        self._dummy.sent_at = now
        self._dummy_deadline = now + self.rtt.timeout
        self.stats.resends += 1
        return [self._emit(self._dummy.wire)]


# -- server ---------------------------------------------------------------------

@dataclass
class ServerSession:
    session_id: int
    created: float
    last_seen: float
    phase: str = SERVER_RECEIVE
    recv: dict[int, str] = field(default_factory=dict)
    client_total: Optional[int] = None
    client_count: int = 0
    received_text: str = ""
    reply_text: str = ""
    reply_payloads: list[str] = field(default_factory=list)
    served: set[int] = field(default_factory=set)
    keys: Optional[SessionKeys] = None

    @property
    def dummy_base(self) -> int:
        return self.client_total + self.client_count

    def owns(self, identity: int) -> bool:
        """Whether a completed session can claim this identity."""
        if self.client_total is None:
            return True
        return self.client_total <= identity < self.dummy_base + len(self.reply_payloads)


@dataclass
class Reply:
    data: bytes


@dataclass
class LocalAnswer:
    """Query that should be answered by the local DNS path."""

    query: bytes


@dataclass
class ServerEvent:
    kind: str
    session_id: int
    detail: str = ""


class BridgeCore:
    """Server-side datagram handler shared by every session.

    ``on_datagram`` never raises on input; it returns :class:`Reply` for
    protocol answers and :class:`LocalAnswer` for queries that must look
    like they came from an ordinary name server.  ``local_answer`` turns the
    latter into bytes using the embedded responder.
    """

    def __init__(self, password: bytes, domain: str, inner: InnerHandshake, rng: random.Random,
                 answer_ip: str = "192.0.2.1", ttl: int = dnswire.DEFAULT_TTL,
                 idle_timeout: float = SESSION_IDLE_TIMEOUT,
                 on_event: Optional[Callable[[ServerEvent], None]] = None):
        self.password = password
        self.domain = dnswire.validate_domain(domain)
        self.inner = inner
        self.rng = rng
        self.answer_ip = answer_ip
        self.ttl = ttl
        self.idle_timeout = idle_timeout
        self.sessions: dict[int, ServerSession] = {}
        self.handovers: list[tuple[SessionKeys, float, int]] = []
        self.on_event = on_event
        self.completed: list[ServerSession] = []

    def reset(self) -> None:
        self.sessions.clear()
        self.handovers.clear()
        self.completed.clear()

    def _event(self, kind: str, sid: int, detail: str = "") -> None:
        log.debug("session %d: %s %s", sid, kind, detail)
        if self.on_event:
            self.on_event(ServerEvent(kind, sid, detail))

    def local_answer(self, query: bytes) -> Optional[bytes]:
        """Embedded authoritative answer: wildcard A with the decoy address."""
        try:
            q = dnswire.parse_query(query)
        except dnswire.DnsWireError:
            return None
        if not q.is_wellformed:
            # no data for other types; FORMERR when there is nothing to answer
            return dnswire.build_error_response(query, dnswire.RCODE_NOERROR if q.name else dnswire.RCODE_FORMERR)
        return dnswire.build_ack_response(query, self.answer_ip, self.ttl)

    def _evict(self, now: float) -> None:
        stale = [sid for sid, s in self.sessions.items() if now - s.last_seen > self.idle_timeout]
        for sid in stale:
            del self.sessions[sid]
        self.handovers = [h for h in self.handovers if now - h[1] <= self.idle_timeout]

    def on_datagram(self, data: bytes, now: float) -> list:
        self._evict(now)
        if len(data) < 12:
            return []
        try:
            q = dnswire.parse_query(data)
        except dnswire.DnsWireError:
            if data[2] & 0x80:
                return []
            return [Reply(dnswire.build_error_response(data, dnswire.RCODE_FORMERR))]
        if data[2] & 0x80:  # a response sent to a server is ignored
            return []
        if not q.is_wellformed or q.prefix is None or not q.under(self.domain):
            return [LocalAnswer(data)]
        parts = split_label(q.payload_label)
        if parts is None:
            return [LocalAnswer(data)]
        prefix, frag = parts
        identity, sid = open_prefix(self.password, CLIENT, frag, prefix)

        sess = self.sessions.get(sid)
        if sess is not None and sess.phase != SERVER_RECEIVE and not sess.owns(identity):
            sess = None
        if sess is None:
            sess = ServerSession(sid, now, now)
            self.sessions[sid] = sess
        sess.last_seen = now

        if sess.phase == FAILED:
            return [LocalAnswer(data)]
        if sess.phase == SERVER_RECEIVE:
            return self._on_client_data(sess, data, identity, frag, now)
        return self._on_dummy(sess, data, identity)

    def _ack(self, query: bytes) -> list:
        return [Reply(dnswire.build_ack_response(query, self.answer_ip, self.ttl))]

    def _on_client_data(self, sess: ServerSession, data: bytes, identity: int, frag: str, now: float) -> list:
        if identity in sess.recv:
            return self._ack(data)
        sess.recv[identity] = frag
        run = find_complete_run(sess.recv)
        if run is None:
            return self._ack(data)
        start, count = run
        sess.client_total, sess.client_count = start, count
        sess.received_text = "".join(sess.recv[start + i] for i in range(count))
        sess.recv = {i: sess.recv[i] for i in range(start, start + count)}
        try:
            message = codec.decode_b32(sess.received_text)
        except CodecError:
            sess.phase = FAILED
            self._event("reject", sess.session_id, "undecodable handshake")
            return self._ack(data)
        outcome = self.inner.server_respond(message)
        if not isinstance(outcome, Accept):
            sess.phase = FAILED
            self._event("reject", sess.session_id, getattr(outcome, "reason", ""))
            return self._ack(data)
        sess.keys = outcome.keys
        sess.reply_text = codec.encode_b32(outcome.reply)
        frags = codec.fragment(sess.reply_text, self.rng)
        base = len(sess.reply_text)
        sess.reply_payloads = [make_payload(self.password, SERVER, f, base + i, sess.session_id)
                               for i, f in enumerate(frags)]
        sess.phase = SERVER_SEND
        self._event("accept", sess.session_id)
        return self._ack(data)

    def _on_dummy(self, sess: ServerSession, data: bytes, identity: int) -> list:
        if identity < sess.dummy_base:
            # a data packet whose ack was lost
            return self._ack(data)
        j = identity - sess.dummy_base
        if j >= len(sess.reply_payloads):
            return self._ack(data)
        if j not in sess.served:
            sess.served.add(j)
            if len(sess.served) == len(sess.reply_payloads) and sess.phase == SERVER_SEND:
                sess.phase = HANDOVER
                self.handovers.append((sess.keys, sess.last_seen, sess.session_id))
                self.completed.append(sess)
                self._event("handover", sess.session_id)
        return [Reply(dnswire.build_data_response(data, sess.reply_payloads[j], self.domain,
                                                  self.answer_ip, self.ttl))]

    def claim_handover(self, check: Callable[[SessionKeys], bool]) -> Optional[SessionKeys]:
        """Pop the pending handover whose keys satisfy ``check``."""
        for i, (keys, _, sid) in enumerate(self.handovers):
            if check(keys):
                del self.handovers[i]
                sess = self.sessions.get(sid)
                if sess is not None and sess.keys is keys:
                    del self.sessions[sid]
                self._event("claimed", sid)
                return keys
        return None
