"""Seeded, event-driven network between a client and a bridge.

The simulator runs on a virtual clock, so a scenario that spans minutes of
retransmission timers finishes in milliseconds and replays bit-for-bit from
its seed.  Besides loss, duplication, reordering and delay it can play the
on-path censor: flip letter case in names, inject random protocol-shaped
packets, and replay captured datagrams.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from . import dnswire
from .codec import ALPHABET, MAX_FRAGMENT, MIN_FRAGMENT
from .config import TunnelConfig
from .ident import CLIENT, open_prefix
from .innerproto import MockScrambleSuit
from .reliability import MAX_SAW_TRANSMISSIONS, WINDOW_SIZE
from .session import HANDOVER, BridgeCore, ClientHandshake, LocalAnswer, Reply, split_label

ADVERSARIES = ("case_flip", "inject_random", "replay_capture")
MAX_VIRTUAL_TIME = 3600.0


@dataclass(frozen=True)
class NetProfile:
    drop_p: float = 0.0
    dup_p: float = 0.0
    reorder_p: float = 0.0
    delay_ms: tuple[float, float] = (10.0, 30.0)
    reorder_ms: float = 60.0
    adversaries: tuple[str, ...] = ()
    inject_p: float = 0.25
    replay_p: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_p", "dup_p", "reorder_p", "inject_p", "replay_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        unknown = set(self.adversaries) - set(ADVERSARIES)
        if unknown:
            raise ValueError(f"unknown adversaries: {sorted(unknown)}")

    def with_seed(self, seed: int) -> "NetProfile":
        return NetProfile(self.drop_p, self.dup_p, self.reorder_p, self.delay_ms, self.reorder_ms,
                          self.adversaries, self.inject_p, self.replay_p, seed)


@dataclass
class Record:
    t: float
    kind: str  # "send" | "deliver"
    origin: str  # "client" | "server" | "adversary"
    dir: str  # "c2s" | "s2c"
    data: bytes


@dataclass
class Transcript:
    records: list[Record] = field(default_factory=list)
    outcome: str = "failure"
    reason: str = ""
    detail: str = ""
    elapsed: float = 0.0
    corrupted: bool = False
    client_sent_text: str = ""
    client_received_text: str = ""
    server_received_text: Optional[str] = None
    server_reply_text: Optional[str] = None
    session_id: int = 0
    max_outstanding: int = 0
    data_packets: int = 0
    dummies: int = 0
    server_accepts: int = 0

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def sends(self, origins: Iterable[str] = ("client", "server")) -> list[Record]:
        origins = set(origins)
        return [r for r in self.records if r.kind == "send" and r.origin in origins]

    @property
    def datagrams(self) -> int:
        return len(self.sends())

    @property
    def bandwidth(self) -> int:
        return sum(len(r.data) for r in self.sends())

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(f"{r.t:.9f}|{r.kind}|{r.origin}|{r.dir}|".encode() + r.data)
        h.update(self.outcome.encode())
        return h.hexdigest()

    def to_ndjson(self) -> str:
        return "".join(
            json.dumps({"t": round(r.t, 6), "dir": r.dir, "origin": r.origin, "bytes_hex": r.data.hex()}) + "\n"
            for r in self.records if r.kind == "send"
        )

    def write_ndjson(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ndjson())

    def client_labels(self) -> list[str]:
        """First label of every query the client sent, in order."""
        out = []
        for r in self.sends(("client",)):
            q = dnswire.parse_query(r.data)
            out.append(q.name.split(".", 1)[0])
        return out


def _flip_case(data: bytes, rng: random.Random) -> bytes:
    buf = bytearray(data)
    try:
        spans = dnswire.name_spans(data)
    except dnswire.DnsWireError:
        return data
    for start, end in spans:
        for i in range(start, end):
            c = buf[i]
            if (65 <= c <= 90 or 97 <= c <= 122) and rng.random() < 0.5:
                buf[i] = c ^ 0x20
    return bytes(buf)


def _random_label(rng: random.Random) -> str:
    n = 5 + rng.randint(MIN_FRAGMENT, MAX_FRAGMENT)
    return "".join(rng.choice(ALPHABET) for _ in range(n))


def build_server(cfg: TunnelConfig, rng: random.Random, replay_cache: Optional[set] = None) -> BridgeCore:
    inner = MockScrambleSuit(cfg.password, cfg.inner, random.Random(rng.getrandbits(64)),
                             replay_cache=set() if replay_cache is None else replay_cache)
    return BridgeCore(cfg.password, cfg.domain, inner, random.Random(rng.getrandbits(64)),
                      answer_ip=cfg.decoy_ip, ttl=cfg.ttl)


class _Sim:
    def __init__(self, profile: NetProfile, client: ClientHandshake, server: BridgeCore, start: float = 0.0):
        self.profile = profile
        root = random.Random(profile.seed)
        self.net_rng = random.Random(root.getrandbits(64))
        self.adv_rng = random.Random(root.getrandbits(64))
        self.client = client
        self.server = server
        self.now = start
        self.queue: list = []
        self.seq = itertools.count()
        self.transcript = Transcript()
        self.captured: list[tuple[str, bytes]] = []
        self.last_client_query: Optional[bytes] = None
        self._timer_at: Optional[float] = None

    def _schedule(self, t: float, kind: str, *payload) -> None:
        heapq.heappush(self.queue, (t, next(self.seq), kind, payload))

    def _delay(self) -> float:
        lo, hi = self.profile.delay_ms
        d = self.net_rng.uniform(lo, hi) / 1000.0
        if self.net_rng.random() < self.profile.reorder_p:
            d += self.net_rng.uniform(0, self.profile.reorder_ms) / 1000.0
        return d

    def send(self, origin: str, direction: str, data: bytes) -> None:
        self.transcript.records.append(Record(self.now, "send", origin, direction, data))
        p = self.profile
        copies = 1 + (self.net_rng.random() < p.dup_p)
        for _ in range(copies):
            if self.net_rng.random() < p.drop_p:
                continue
            self._schedule(self.now + self._delay(), "deliver", origin, direction, data)
        if origin == "client":
            self.last_client_query = data
            if "inject_random" in p.adversaries:
                self._maybe_inject()

    def _maybe_inject(self) -> None:
        rng = self.adv_rng
        if rng.random() < self.profile.inject_p:
            q = dnswire.build_query(_random_label(rng), self.server.domain, rng.randrange(0x10000))
            self.send("adversary", "c2s", q)
        if rng.random() < self.profile.inject_p and self.last_client_query is not None:
            # on-path forger racing the bridge's answer to the latest query;
            # half the time it copies the question, otherwise it makes one up
            if rng.random() < 0.5:
                target = self.last_client_query
            else:
                qid = int.from_bytes(self.last_client_query[:2], "big")
                target = dnswire.build_query(_random_label(rng), self.server.domain, qid)
            if rng.random() < 0.5:
                resp = dnswire.build_data_response(target, _random_label(rng), self.server.domain, "192.0.2.99")
            else:
                resp = dnswire.build_ack_response(target, "192.0.2.99")
            self.send("adversary", "s2c", resp)

    def _deliver(self, origin: str, direction: str, data: bytes) -> None:
        p = self.profile
        if "case_flip" in p.adversaries:
            data = _flip_case(data, self.adv_rng)
        self.transcript.records.append(Record(self.now, "deliver", origin, direction, data))
        if "replay_capture" in p.adversaries:
            self.captured.append((direction, data))
            if self.adv_rng.random() < p.replay_p:
                d, old = self.adv_rng.choice(self.captured)
                self.transcript.records.append(Record(self.now, "send", "adversary", d, old))
                self._schedule(self.now + self._delay(), "deliver", "adversary", d, old)
        if direction == "c2s":
            for action in self.server.on_datagram(data, self.now):
                if isinstance(action, Reply):
                    self.send("server", "s2c", action.data)
                elif isinstance(action, LocalAnswer):
                    answer = self.server.local_answer(action.query)
                    if answer is not None:
                        self.send("server", "s2c", answer)
        else:
            for out in self.client.on_datagram(data, self.now):
                self.send("client", "c2s", out)

    def _arm_timer(self) -> None:
        deadline = self.client.next_deadline()
        if deadline is not None and deadline != self._timer_at:
            self._timer_at = deadline
            self._schedule(max(deadline, self.now), "timer")

    def run(self, max_time: float = MAX_VIRTUAL_TIME) -> Transcript:
        start = self.now
        for out in self.client.start(self.now):
            self.send("client", "c2s", out)
        self._arm_timer()
        while self.queue and not self.client.done:
            t, _, kind, payload = heapq.heappop(self.queue)
            if t - start > max_time:
                break
            self.now = t
            if kind == "deliver":
                self._deliver(*payload)
            else:
                deadline = self.client.next_deadline()
                if deadline is not None and deadline <= self.now:
                    self._timer_at = None
                    for out in self.client.on_timer(self.now):
                        self.send("client", "c2s", out)
            self._arm_timer()
        return self._finish(start)

    def _finish(self, start: float) -> Transcript:
        tr = self.transcript
        c = self.client
        tr.elapsed = self.now - start
        tr.session_id = c.session_id
        tr.client_sent_text = c.sent_text
        tr.client_received_text = c.received_text
        tr.max_outstanding = c.stats.max_outstanding
        tr.data_packets = c.stats.data_packets
        tr.dummies = c.stats.dummies
        tr.server_accepts = getattr(self.server.inner, "accepts", 0)
        sess = None
        for s in itertools.chain(reversed(self.server.completed), self.server.sessions.values()):
            if s.session_id == c.session_id and s.client_total is not None:
                sess = s
                break
        if sess is not None:
            tr.server_received_text = sess.received_text
            tr.server_reply_text = sess.reply_text
            if sess.received_text != c.sent_text:
                tr.corrupted = True
        if c.received_text and sess is not None and c.received_text != sess.reply_text:
            tr.corrupted = True
        if c.phase == HANDOVER and sess is not None and sess.keys == c.keys:
            tr.outcome = "success"
        elif not c.done:
            tr.outcome, tr.reason = "failure", "deadlock"
        else:
            tr.outcome = "failure"
            tr.reason = c.failure.reason if c.failure else "keys_mismatch"
            tr.detail = c.failure.detail if c.failure else ""
        return tr


def make_client(cfg: TunnelConfig, rng: random.Random) -> ClientHandshake:
    inner = MockScrambleSuit(cfg.password, cfg.inner, random.Random(rng.getrandbits(64)))
    return ClientHandshake(cfg.password, cfg.domain, inner, random.Random(rng.getrandbits(64)),
                           pacing=cfg.pacing)


def run_scenario(profile: NetProfile, client_cfg: TunnelConfig, server_cfg: Optional[TunnelConfig] = None,
                 server: Optional[BridgeCore] = None, start: float = 0.0) -> Transcript:
    """Run one handshake through the simulated network.

    Every random choice (protocol and network) derives from ``profile.seed``.
    Pass ``server`` to reuse a bridge across scenarios.
    """
    server_cfg = server_cfg or client_cfg
    root = random.Random(f"scenario-{profile.seed}")
    client = make_client(client_cfg, random.Random(root.getrandbits(64)))
    server_rng = random.Random(root.getrandbits(64))
    if server is None:
        server = build_server(server_cfg, server_rng)
    return _Sim(profile, client, server, start).run()


# -- transcript post-conditions -------------------------------------------------

def check_transcript(tr: Transcript, password: Optional[bytes] = None) -> list[str]:
    """Return a list of violated wire invariants (empty when all hold)."""
    problems: list[str] = []
    queries_at_server = 0
    responses = 0
    seen_qids: set[int] = set()
    counts: dict[bytes, int] = {}
    for r in tr.records:
        if r.kind == "deliver" and r.dir == "c2s":
            queries_at_server += 1
            seen_qids.add(int.from_bytes(r.data[:2], "big"))
        if r.kind != "send":
            continue
        if len(r.data) > dnswire.MAX_UDP_MESSAGE:
            problems.append(f"t={r.t:.3f}: {len(r.data)}-byte message")
        if r.origin == "server":
            responses += 1
            if responses > queries_at_server:
                problems.append(f"t={r.t:.3f}: more responses than queries")
            qid = int.from_bytes(r.data[:2], "big")
            if qid not in seen_qids:
                problems.append(f"t={r.t:.3f}: response qid {qid} matches no query")
        elif r.origin == "client":
            counts[r.data] = counts.get(r.data, 0) + 1
            label = dnswire.parse_query(r.data).name.split(".", 1)[0]
            if not 5 + 1 <= len(label) <= 5 + MAX_FRAGMENT:
                problems.append(f"t={r.t:.3f}: client label of {len(label)} chars")
    worst = max(counts.values(), default=0)
    if worst > MAX_SAW_TRANSMISSIONS:
        problems.append(f"a client datagram was transmitted {worst} times")
    if password is not None:
        peak = _peak_outstanding(tr, password)
        if peak > WINDOW_SIZE:
            problems.append(f"{peak} data packets outstanding at once")
    return problems


def _peak_outstanding(tr: Transcript, password: bytes) -> int:
    """Largest number of client data packets in flight, judged from the wire.

    A data packet is in flight from its first transmission until a response
    echoing the qid and question of any of its transmissions reaches the
    client.
    """
    lo = len(tr.client_sent_text)
    hi = lo + tr.data_packets
    inflight: dict[int, set[tuple[int, str]]] = {}  # identity -> every (qid, qname) it was sent as
    done: set[int] = set()
    peak = 0
    for r in tr.records:
        if r.kind == "send" and r.origin == "client":
            q = dnswire.parse_query(r.data)
            parts = split_label(q.payload_label or "")
            if parts is None:
                continue
            identity, _ = open_prefix(password, CLIENT, parts[1], parts[0])
            if lo <= identity < hi and identity not in done:
                inflight.setdefault(identity, set()).add((q.qid, q.name.lower()))
                peak = max(peak, len(inflight))
        elif r.kind == "deliver" and r.dir == "s2c":
            try:
                m = dnswire.parse_message(r.data)
            except dnswire.DnsWireError:
                continue
            if not m.questions:
                continue
            key = (m.qid, m.questions[0].name.lower())
            for identity, sent in list(inflight.items()):
                if key in sent:
                    del inflight[identity]
                    done.add(identity)
    return peak


# -- active probing -----------------------------------------------------------------

@dataclass
class ProbeReport:
    kind: str
    probes: int = 0
    answered: int = 0
    wellformed: int = 0
    accepts: int = 0
    responsive_after: bool = False

    @property
    def all_answered(self) -> bool:
        return self.answered == self.probes and self.wellformed == self.probes


def _answer(server: BridgeCore, query: bytes, now: float) -> Optional[bytes]:
    out = server.on_datagram(query, now)
    for action in out:
        if isinstance(action, Reply):
            return action.data
        if isinstance(action, LocalAnswer):
            return server.local_answer(action.query)
    return None


def _wellformed_answer(query: bytes, answer: Optional[bytes]) -> bool:
    if answer is None:
        return False
    try:
        m = dnswire.parse_message(answer)
        q = dnswire.parse_message(query)
    except dnswire.DnsWireError:
        return False
    return (m.is_response and m.qid == q.qid
            and [x.name for x in m.questions] == [x.name for x in q.questions])


def probe_driver(profile: NetProfile, server_cfg: TunnelConfig, kind: str, n: int = 1000,
                 server: Optional[BridgeCore] = None) -> ProbeReport:
    """Probe a bridge without the password and report what the prober saw.

    ``random`` sends protocol-shaped labels with random content, ``replay``
    re-sends the client side of a captured honest handshake (both while the
    session is alive and after it has been evicted), ``dig`` sends ordinary
    lookups.
    """
    rng = random.Random(f"probe-{kind}-{profile.seed}")
    if server is None:
        server = build_server(server_cfg, random.Random(rng.getrandbits(64)))
    report = ProbeReport(kind)
    now = 0.0
    captured: list[bytes] = []
    if kind == "replay":
        honest = run_scenario(NetProfile(seed=profile.seed), server_cfg, server=server)
        captured = [r.data for r in honest.sends(("client",))]
        now = honest.elapsed + 1.0
    accepts_before = getattr(server.inner, "accepts", 0)

    for i in range(n):
        if kind == "random":
            query = dnswire.build_query(_random_label(rng), server.domain, rng.randrange(0x10000))
        elif kind == "replay":
            query = captured[i % len(captured)]
            if i == n // 2:
                now += server.idle_timeout + 1.0  # the original session has been evicted
        elif kind == "dig":
            name = rng.choice(["www.example.com", "mail.example.org", f"host{i}.{server.domain}",
                               server.domain, "d3qdfnco3bamip.cloudfront.net"])
            query = dnswire.build_plain_query(name, rng.randrange(0x10000))
        else:
            raise ValueError(f"unknown probe kind {kind!r}")
        now += 0.01
        answer = _answer(server, query, now)
        report.probes += 1
        report.answered += answer is not None
        report.wellformed += _wellformed_answer(query, answer)

    report.accepts = getattr(server.inner, "accepts", 0) - accepts_before
    check = dnswire.build_plain_query("www.example.com", 0x1234)
    report.responsive_after = _wellformed_answer(check, _answer(server, check, now + 0.01))
    return report
