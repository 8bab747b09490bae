"""Loss recovery for the UDP carrier.

The client's send phase is a selective-repeat variant with a window of four
packets keyed by DNS query ID; its receive phase is stop-and-wait with an
EWMA round-trip estimate.  Receivers suppress duplicates by identity.

These are plain state machines; the caller feeds in events (acks, timer
expiries, responses) and performs whatever action comes back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

WINDOW_SIZE = 4
ACKS_BEFORE_RESEND = 3
ALPHA = 1 / 8
INITIAL_TIMEOUT = 1.0
TIMEOUT_MULTIPLIER = 2.0
MAX_SAW_TRANSMISSIONS = 3
MAX_SEND_ATTEMPTS = 5


class WindowFull(RuntimeError):
    pass


class NonPositiveSample(ValueError):
    pass


@dataclass
class RttEstimator:
    rtt: Optional[float] = None
    alpha: float = ALPHA
    k: float = TIMEOUT_MULTIPLIER
    initial_timeout: float = INITIAL_TIMEOUT
    # floor for real networks, where a loopback-sized RTT would make timers fire on jitter
    min_timeout: float = 0.0

    def update(self, sample: float) -> float:
        if sample <= 0:
            raise NonPositiveSample(f"RTT sample must be positive, got {sample}")
        if self.rtt is None:
            self.rtt = sample
        else:
            self.rtt = self.alpha * sample + (1 - self.alpha) * self.rtt
        return self.rtt

    @property
    def timeout(self) -> float:
        if self.rtt is None:
            return self.initial_timeout
        return max(self.k * self.rtt, self.min_timeout)


def rtt_update(est: RttEstimator, sample: float) -> RttEstimator:
    est.update(sample)
    return est


@dataclass
class WindowEntry:
    qid: int
    wire: bytes
    identity: int
    sent_at: float = 0.0
    attempts: int = 1
    # earlier qids stay valid: a late ack for a superseded transmission still counts
    old_qids: list[int] = field(default_factory=list)

    def matches(self, qid: int) -> bool:
        return qid == self.qid or qid in self.old_qids

    def requery(self, new_qid: int) -> None:
        self.old_qids.append(self.qid)
        self.qid = new_qid
        self.attempts += 1


@dataclass
class SendWindow:
    """Outstanding client data packets in send order."""

    capacity: int = WINDOW_SIZE
    entries: list[WindowEntry] = field(default_factory=list)
    acks_since_head: int = 0

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def on_send(self, entry: WindowEntry) -> None:
        if self.full:
            raise WindowFull(f"{len(self.entries)} packets already outstanding")
        if self.entries and entry.identity <= self.entries[-1].identity:
            raise ValueError("window entries must increase in identity")
        self.entries.append(entry)

    def find(self, qid: int) -> Optional[WindowEntry]:
        for e in self.entries:
            if e.matches(qid):
                return e
        return None

    def on_ack(self, qid: int, new_qid: Callable[[], int]) -> tuple[Optional[WindowEntry], Optional[WindowEntry]]:
        """Process an ack.

        Returns ``(acked, resend)``: the entry the ack removed (None for an
        unknown qid) and, when the head has now been passed over by three
        acks, the head entry re-keyed with a fresh qid that must be resent.
        """
        entry = self.find(qid)
        if entry is None:
            return None, None
        head = self.entries[0]
        self.entries.remove(entry)
        if entry is head:
            self.acks_since_head = 0
            return entry, None
        self.acks_since_head += 1
        if self.acks_since_head >= ACKS_BEFORE_RESEND:
            self.acks_since_head = 0
            head.requery(new_qid())
            return entry, head
        return entry, None

    def rekey(self, entry: WindowEntry, new_qid: int) -> None:
        """Timer-driven resend of any entry under a new qid."""
        entry.requery(new_qid)
        if self.entries and entry is self.entries[0]:
            self.acks_since_head = 0


def window_on_send(w: SendWindow, entry: WindowEntry) -> SendWindow:
    w.on_send(entry)
    return w


def window_on_ack(w: SendWindow, acked_qid: int, new_qid: Callable[[], int]) -> tuple[SendWindow, str]:
    _, resend = w.on_ack(acked_qid, new_qid)
    return w, ("resend_head_with_new_qid" if resend is not None else "none")


@dataclass
class StopAndWait:
    """One outstanding query, resent verbatim (same qid) on timeout."""

    max_transmissions: int = MAX_SAW_TRANSMISSIONS
    transmissions: int = 0

    def on_send(self) -> None:
        self.transmissions = 1

    def step(self, event: str) -> str:
        if event == "response_received":
            self.transmissions = 1
            return "deliver"
        if event == "timeout":
            if self.transmissions >= self.max_transmissions:
                return "fail"
            self.transmissions += 1
            return "resend_same_packet"
        raise ValueError(f"unknown event {event!r}")


def stop_and_wait_step(state: StopAndWait, event: str) -> tuple[StopAndWait, str]:
    return state, state.step(event)


def dedupe_on_receive(buffer: dict, identity: int) -> tuple[dict, str]:
    """``buffer_it`` for an unseen identity, ``ack_only`` for a repeat."""
    if identity in buffer:
        return buffer, "ack_only"
    return buffer, "buffer_it"
