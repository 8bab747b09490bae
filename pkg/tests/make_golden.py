"""Regenerate tests/data/golden_corpus.ndjson from a seeded lossless handshake.

Run from the repository root: ``python tests/make_golden.py``.
"""

import json
from pathlib import Path

from dnsmorph import dnswire
from dnsmorph.config import TunnelConfig
from dnsmorph.simnet import NetProfile, run_scenario

OUT = Path(__file__).parent / "data" / "golden_corpus.ndjson"
GOLDEN_PASSWORD = b"golden-corpus-password"


def golden_messages() -> list[dict]:
    cfg = TunnelConfig(password=GOLDEN_PASSWORD)
    tr = run_scenario(NetProfile(seed=2024), cfg)
    out = [{"origin": r.origin, "hex": r.data.hex()} for r in tr.sends()]
    q = dnswire.build_plain_query("www.example.com", 0x4242)
    extra = [
        dnswire.build_plain_query("www.example.com", 0x4242),
        dnswire.build_ack_response(q, "192.0.2.1"),
        dnswire.build_error_response(q, dnswire.RCODE_FORMERR),
        dnswire.build_plain_query("d3qdfnco3bamip.cloudfront.net", 7, qtype=28),
    ]
    out += [{"origin": "builder", "hex": m.hex()} for m in extra]
    return out


if __name__ == "__main__":
    OUT.write_text("".join(json.dumps(m) + "\n" for m in golden_messages()))
    print(f"wrote {OUT}")
