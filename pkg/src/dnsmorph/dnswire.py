"""RFC 1035 messages in the three shapes the tunnel uses.

* type-A queries whose first label is ``prefix || fragment``;
* ack responses: one A answer for the queried name;
* data responses: a CNAME from the queried name to ``payload.<domain>``,
  followed by an A record for that target.

Parsing is tolerant: anything that is a DNS message but not one of these
shapes is classified rather than rejected, because the bridge still has to
answer it like an ordinary name server would.
"""

from __future__ import annotations

import ipaddress
import re
import struct
from dataclasses import dataclass, field
from typing import Optional

from .ident import PREFIX_LEN

TYPE_A = 1
TYPE_CNAME = 5
CLASS_IN = 1

RCODE_NOERROR = 0
RCODE_FORMERR = 1
RCODE_NXDOMAIN = 3

DEFAULT_TTL = 60
MAX_LABEL = 63
MAX_NAME = 255
MAX_UDP_MESSAGE = 512

_HEADER = struct.Struct("!HHHHHH")
_HOST_LABEL = re.compile(r"[A-Za-z0-9](?:[A-Za-z0-9-]*[A-Za-z0-9])?")

FLAG_QR = 0x8000
FLAG_AA = 0x0400
FLAG_RD = 0x0100
FLAG_RA = 0x0080


class DnsWireError(ValueError):
    pass


class TruncatedMessage(DnsWireError):
    pass


class LabelTooLong(DnsWireError):
    pass


class NameTooLong(DnsWireError):
    pass


class InvalidDomain(DnsWireError):
    pass


def validate_domain(domain: str) -> str:
    domain = domain.rstrip(".")
    labels = domain.split(".") if domain else []
    if not labels:
        raise InvalidDomain("bridge domain must have at least one label")
    for label in labels:
        if len(label) > MAX_LABEL:
            raise LabelTooLong(f"label {label[:16]!r}... is {len(label)} octets")
        if not _HOST_LABEL.fullmatch(label):
            raise InvalidDomain(f"{label!r} is not a hostname label")
    return domain


def encode_name(name: str) -> bytes:
    name = name.rstrip(".")
    out = bytearray()
    for label in name.split(".") if name else []:
        raw = label.encode("ascii")
        if not raw:
            raise InvalidDomain(f"empty label in {name!r}")
        if len(raw) > MAX_LABEL:
            raise LabelTooLong(f"label of {len(raw)} octets exceeds {MAX_LABEL}")
        out.append(len(raw))
        out += raw
    out.append(0)
    if len(out) > MAX_NAME:
        raise NameTooLong(f"name of {len(out)} octets exceeds {MAX_NAME}")
    return bytes(out)


def read_name(msg: bytes, offset: int) -> tuple[str, int]:
    """Read a possibly compressed name; return (name, offset after it)."""
    labels = []
    end = None
    hops = 0
    while True:
        if offset >= len(msg):
            raise TruncatedMessage("name runs past end of message")
        length = msg[offset]
        if length & 0xC0 == 0xC0:
            if offset + 1 >= len(msg):
                raise TruncatedMessage("truncated compression pointer")
            if end is None:
                end = offset + 2
            offset = ((length & 0x3F) << 8) | msg[offset + 1]
            hops += 1
            if hops > 64:
                raise DnsWireError("compression loop")
            continue
        if length & 0xC0:
            raise DnsWireError(f"unsupported label type 0x{length:02x}")
        offset += 1
        if length == 0:
            break
        if offset + length > len(msg):
            raise TruncatedMessage("label runs past end of message")
        labels.append(msg[offset:offset + length].decode("latin-1"))
        offset += length
    return ".".join(labels), end if end is not None else offset


def name_spans(msg: bytes) -> list[tuple[int, int]]:
    """Byte ranges of every uncompressed label in the question and answer names.

    Used by the network simulator to tamper with letter case the way an
    on-path box rewriting names would.
    """
    spans: list[tuple[int, int]] = []

    def walk(offset: int) -> int:
        while offset < len(msg):
            length = msg[offset]
            if length & 0xC0 == 0xC0:
                return offset + 2
            offset += 1
            if length == 0:
                return offset
            spans.append((offset, min(offset + length, len(msg))))
            offset += length
        raise TruncatedMessage("name runs past end of message")

    if len(msg) < _HEADER.size:
        raise TruncatedMessage("shorter than a DNS header")
    _, _, qd, an, ns, ar = _HEADER.unpack_from(msg)
    off = _HEADER.size
    for _ in range(qd):
        off = walk(off) + 4
    for _ in range(an):
        off = walk(off)
        if off + 10 > len(msg):
            raise TruncatedMessage("truncated resource record")
        rtype, _, _, rdlen = struct.unpack_from("!HHIH", msg, off)
        off += 10
        if rtype == TYPE_CNAME:
            walk(off)
        off += rdlen
    return spans


@dataclass
class Question:
    name: str
    qtype: int = TYPE_A
    qclass: int = CLASS_IN


@dataclass
class ResourceRecord:
    name: str
    rtype: int
    rclass: int
    ttl: int
    rdata: bytes
    target: Optional[str] = None  # decoded CNAME target

    @property
    def address(self) -> Optional[str]:
        if self.rtype == TYPE_A and len(self.rdata) == 4:
            return str(ipaddress.IPv4Address(self.rdata))
        return None


@dataclass
class Message:
    qid: int
    flags: int
    questions: list[Question] = field(default_factory=list)
    answers: list[ResourceRecord] = field(default_factory=list)
    authority_count: int = 0
    additional_count: int = 0

    @property
    def is_response(self) -> bool:
        return bool(self.flags & FLAG_QR)

    @property
    def opcode(self) -> int:
        return (self.flags >> 11) & 0xF

    @property
    def rcode(self) -> int:
        return self.flags & 0xF


def parse_message(msg: bytes) -> Message:
    if len(msg) < _HEADER.size:
        raise TruncatedMessage(f"{len(msg)} bytes is shorter than a DNS header")
    qid, flags, qd, an, ns, ar = _HEADER.unpack_from(msg)
    out = Message(qid, flags, authority_count=ns, additional_count=ar)
    off = _HEADER.size
    for _ in range(qd):
        name, off = read_name(msg, off)
        if off + 4 > len(msg):
            raise TruncatedMessage("truncated question")
        qtype, qclass = struct.unpack_from("!HH", msg, off)
        off += 4
        out.questions.append(Question(name, qtype, qclass))
    for _ in range(an):
        name, off = read_name(msg, off)
        if off + 10 > len(msg):
            raise TruncatedMessage("truncated resource record")
        rtype, rclass, ttl, rdlen = struct.unpack_from("!HHIH", msg, off)
        off += 10
        if off + rdlen > len(msg):
            raise TruncatedMessage("truncated rdata")
        rdata = msg[off:off + rdlen]
        target = read_name(msg, off)[0] if rtype == TYPE_CNAME else None
        off += rdlen
        out.answers.append(ResourceRecord(name, rtype, rclass, ttl, rdata, target))
    return out


# -- queries -----------------------------------------------------------------

def payload_name(payload: str, domain: str) -> str:
    if len(payload) > MAX_LABEL:
        raise LabelTooLong(f"payload label of {len(payload)} octets exceeds {MAX_LABEL}")
    return f"{payload}.{domain.rstrip('.')}"


def build_query(payload: str, domain: str, qid: int) -> bytes:
    """A recursion-desired type-A query for ``payload.domain``."""
    name = encode_name(payload_name(payload, domain))
    header = _HEADER.pack(qid & 0xFFFF, FLAG_RD, 1, 0, 0, 0)
    return header + name + struct.pack("!HH", TYPE_A, CLASS_IN)


def build_plain_query(name: str, qid: int, qtype: int = TYPE_A) -> bytes:
    header = _HEADER.pack(qid & 0xFFFF, FLAG_RD, 1, 0, 0, 0)
    return header + encode_name(name) + struct.pack("!HH", qtype, CLASS_IN)


@dataclass
class ParsedQuery:
    qid: int
    name: str
    qtype: int
    qclass: int
    is_wellformed: bool
    # set only when the first label is long enough to be prefix || fragment
    prefix: Optional[str] = None
    fragment: Optional[str] = None
    domain: Optional[str] = None

    @property
    def payload_label(self) -> Optional[str]:
        if self.prefix is None:
            return None
        return self.prefix + self.fragment

    def under(self, domain: str) -> bool:
        return self.domain is not None and self.domain.lower() == domain.lower().rstrip(".")


def parse_query(msg: bytes) -> ParsedQuery:
    """Parse a query; shape problems are flagged instead of raised.

    ``is_wellformed`` means: a standard query with exactly one IN/A question.
    ``prefix``/``fragment`` are split off the first label whenever it is long
    enough; whether they open under the shared password is for the session
    layer to decide.
    """
    m = parse_message(msg)
    if not m.questions:
        return ParsedQuery(m.qid, "", 0, 0, False)
    q = m.questions[0]
    wellformed = (
        not m.is_response
        and m.opcode == 0
        and len(m.questions) == 1
        and q.qtype == TYPE_A
        and q.qclass == CLASS_IN
    )
    first, _, rest = q.name.partition(".")
    out = ParsedQuery(m.qid, q.name, q.qtype, q.qclass, wellformed)
    if len(first) > PREFIX_LEN and rest:
        out.prefix, out.fragment, out.domain = first[:PREFIX_LEN], first[PREFIX_LEN:], rest
    return out


# -- responses ---------------------------------------------------------------

def _question_bytes(msg: bytes) -> bytes:
    """Raw question section of a query (name bytes kept exactly as received)."""
    if len(msg) < _HEADER.size:
        raise TruncatedMessage("shorter than a DNS header")
    _, _, qd, _, _, _ = _HEADER.unpack_from(msg)
    off = _HEADER.size
    for _ in range(qd):
        _, off = read_name(msg, off)
        off += 4
    if off > len(msg):
        raise TruncatedMessage("truncated question")
    return msg[_HEADER.size:off]


def _response_header(query: bytes, qd: int, an: int, rcode: int = RCODE_NOERROR) -> bytes:
    qid, qflags = struct.unpack_from("!HH", query)
    flags = FLAG_QR | FLAG_AA | (qflags & FLAG_RD) | (qflags & 0x7800) | FLAG_RA | rcode
    return _HEADER.pack(qid, flags, qd, an, 0, 0)


def _a_rdata(answer_ip: str) -> bytes:
    return ipaddress.IPv4Address(answer_ip).packed


_PTR_QNAME = 0xC000 | _HEADER.size  # the question name always sits right after the header


def build_ack_response(query: bytes, answer_ip: str, ttl: int = DEFAULT_TTL) -> bytes:
    """One A answer for the queried name, echoing qid and question."""
    question = _question_bytes(query)
    rr = struct.pack("!HHHIH", _PTR_QNAME, TYPE_A, CLASS_IN, ttl, 4) + _a_rdata(answer_ip)
    return _response_header(query, 1, 1) + question + rr


def build_data_response(query: bytes, data_payload: str, domain: str, answer_ip: str,
                        ttl: int = DEFAULT_TTL) -> bytes:
    """CNAME qname -> ``data_payload.domain`` plus an A record for the target."""
    question = _question_bytes(query)
    target = encode_name(payload_name(data_payload, domain))
    head = _response_header(query, 1, 2) + question
    target_off = len(head) + 12  # name pointer (2) + type/class/ttl/rdlength (10)
    cname = struct.pack("!HHHIH", _PTR_QNAME, TYPE_CNAME, CLASS_IN, ttl, len(target)) + target
    a_rec = struct.pack("!HHHIH", 0xC000 | target_off, TYPE_A, CLASS_IN, ttl, 4) + _a_rdata(answer_ip)
    out = head + cname + a_rec
    if len(out) > MAX_UDP_MESSAGE:
        raise NameTooLong(f"response of {len(out)} octets exceeds {MAX_UDP_MESSAGE}")
    return out


def build_error_response(query: bytes, rcode: int) -> bytes:
    try:
        question = _question_bytes(query)
        qd = struct.unpack_from("!H", query, 4)[0]
    except DnsWireError:
        question, qd = b"", 0
    return _response_header(query, qd, 0, rcode) + question


@dataclass
class ParsedResponse:
    qid: int
    kind: str  # "ack" | "data" | "other"
    name: str = ""
    address: Optional[str] = None
    payload_label: Optional[str] = None
    domain: Optional[str] = None


def parse_response(msg: bytes) -> ParsedResponse:
    m = parse_message(msg)
    name = m.questions[0].name if m.questions else ""
    if not m.is_response or m.rcode != RCODE_NOERROR or len(m.questions) != 1:
        return ParsedResponse(m.qid, "other", name)
    ans = m.answers
    if len(ans) == 1 and ans[0].rtype == TYPE_A and ans[0].address:
        return ParsedResponse(m.qid, "ack", name, address=ans[0].address)
    if (len(ans) == 2 and ans[0].rtype == TYPE_CNAME and ans[1].rtype == TYPE_A
            and ans[0].target and ans[1].address
            and ans[1].name.lower() == ans[0].target.lower()):
        label, _, domain = ans[0].target.partition(".")
        return ParsedResponse(m.qid, "data", name, address=ans[1].address,
                              payload_label=label, domain=domain)
    return ParsedResponse(m.qid, "other", name)
