"""Acceptance criteria, each checked at its stated tolerance.

Every check records a one-line verdict; the lines are printed at the end
of the pytest run (see conftest.py) and when this file is run directly.
"""

import asyncio
import dataclasses
import json
import os
import random
import statistics
import time
from pathlib import Path

import dns.message
import pytest

from dnsmorph import dnswire, handover
from dnsmorph.bench import bench, entropy_check
from dnsmorph.bridge import BridgeServer
from dnsmorph.client import open_tunnel, run_handshake
from dnsmorph.codec import decode_b32, encode_b32
from dnsmorph.config import TunnelConfig
from dnsmorph.innerproto import derive_session_keys
from dnsmorph.reliability import RttEstimator
from dnsmorph.simnet import NetProfile, build_server, check_transcript, probe_driver, run_scenario
from oracles import ewma_closed_form, ref_b32decode, ref_b32encode

pytestmark = pytest.mark.acceptance

PASSWORD = b"acceptance suite shared secret"
SHORT = TunnelConfig(password=PASSWORD, pad_max=100, seed=1)
ORIGINAL = TunnelConfig(password=PASSWORD, pad_max=1308, seed=1)
GOLDEN = Path(__file__).parent / "data" / "golden_corpus.ndjson"

RESULTS: list[str] = []


def verdict(tag: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
    assert ok, detail


def band(center: float, rel: float) -> tuple[float, float]:
    return center * (1 - rel), center * (1 + rel)


# 1 ------------------------------------------------------------------------------

def test_packet_count_envelope():
    t0 = time.perf_counter()
    short = [run_scenario(NetProfile(seed=s), SHORT) for s in range(200)]
    original = [run_scenario(NetProfile(seed=s), ORIGINAL) for s in range(200)]
    elapsed = time.perf_counter() - t0

    ns = [tr.datagrams for tr in short]
    no = [tr.datagrams for tr in original]
    lo_s, hi_s = band(81, 0.15)
    lo_o, hi_o = band(262, 0.15)
    ok = (all(tr.success for tr in short + original)
          and all(26 <= n <= 96 for n in ns) and lo_s <= statistics.fmean(ns) <= hi_s
          and all(n <= 458 for n in no) and lo_o <= statistics.fmean(no) <= hi_o
          and elapsed < 60)
    verdict("1 packet-count envelope", ok,
            f"pad 100: {min(ns)}-{max(ns)} mean {statistics.fmean(ns):.1f} (band {lo_s:.2f}-{hi_s:.2f}); "
            f"pad 1308: max {max(no)} mean {statistics.fmean(no):.1f} (band {lo_o:.1f}-{hi_o:.1f}); {elapsed:.1f} s")


# 2 ------------------------------------------------------------------------------

def test_loopback_bandwidth():
    t0 = time.perf_counter()
    short = bench(30, SHORT, "loopback").summary()
    original = bench(30, ORIGINAL, "loopback").summary()
    elapsed = time.perf_counter() - t0
    lo_s, hi_s = 6070 * 0.75, 6743 * 1.25
    lo_o, hi_o = 22054 * 0.75, 22840 * 1.25
    ok = (short["success_rate"] == 1.0 and original["success_rate"] == 1.0
          and lo_s <= short["bandwidth"] <= hi_s and lo_o <= original["bandwidth"] <= hi_o
          and elapsed < 60)
    verdict("2 loopback bandwidth", ok,
            f"shortened {short['bandwidth']:.0f} B in [{lo_s:.1f}, {hi_s:.2f}], "
            f"original {original['bandwidth']:.0f} B in [{lo_o:.1f}, {hi_o:.0f}], "
            f"success {short['success_rate']:.0%}/{original['success_rate']:.0%}; "
            f"times (reported only) median {short['median'] * 1e3:.1f} ms / {original['median'] * 1e3:.1f} ms; "
            f"{elapsed:.1f} s")


# 3 ------------------------------------------------------------------------------

def test_entropy_band(tmp_path):
    labels = []
    seed = 0
    while len(labels) < 36:
        labels += run_scenario(NetProfile(seed=seed), SHORT).client_labels()
        seed += 1
    corpus = tmp_path / "prefixes.txt"
    corpus.write_text("".join(label + "\n" for label in labels[:36]))
    ratios = entropy_check(corpus)
    verdict("3 entropy band", 0.62 <= ratios["deflate_ratio"] <= 0.73,
            f"deflate ratio {ratios['deflate_ratio']:.3f} in [0.62, 0.73] over {ratios['prefixes']} prefixes "
            f"(block-sorting {ratios['block_ratio']:.3f})")


# 4 ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lossy_runs():
    return [run_scenario(NetProfile(drop_p=0.1, seed=s), SHORT) for s in range(500)]


def test_reliability_success_rate(lossy_runs):
    rate = sum(tr.success for tr in lossy_runs) / len(lossy_runs)
    verdict("4a drop 0.1 success rate", rate >= 0.95, f"{rate:.1%} of 500 runs succeeded (need >= 95%)")


def test_reliability_invariants(lossy_runs):
    deadlocks = sum(tr.reason == "deadlock" for tr in lossy_runs)
    violations = [v for tr in lossy_runs for v in check_transcript(tr, PASSWORD)]
    verdict("4b no deadlock, at-most-3, window of 4", deadlocks == 0 and not violations,
            f"{deadlocks} deadlocks, {len(violations)} transcript violations over 500 runs")


def test_rtt_closed_form():
    rng = random.Random(4)
    worst = 0.0
    for _ in range(1000):
        samples = [rng.uniform(1e-4, 5.0) for _ in range(rng.randint(1, 300))]
        est = RttEstimator()
        for s in samples:
            est.update(s)
        worst = max(worst, abs(est.rtt - ewma_closed_form(samples)))
    verdict("4c RTT EWMA closed form", worst <= 1e-12, f"max abs error {worst:.2e} over 1000 sequences")


# 5 ------------------------------------------------------------------------------

def test_case_flip():
    runs = [run_scenario(NetProfile(adversaries=("case_flip",), seed=s), SHORT) for s in range(500)]
    rate = sum(tr.success for tr in runs) / len(runs)
    verdict("5a case flip", rate == 1.0, f"{rate:.1%} of 500 case-flipped handshakes succeeded")


def test_injection_and_replay():
    corrupted = 0
    injected = replayed = 0
    for s in range(500):
        tr = run_scenario(NetProfile(adversaries=("inject_random",), seed=s), SHORT)
        corrupted += tr.corrupted
        injected += sum(r.origin == "adversary" for r in tr.sends(("adversary",)))
        tr = run_scenario(NetProfile(adversaries=("replay_capture",), seed=s), SHORT)
        corrupted += tr.corrupted
        replayed += len(tr.sends(("adversary",)))
    ok = corrupted == 0 and injected > 0 and replayed > 0
    verdict("5b injection and replay", ok,
            f"{corrupted} corrupted reassemblies over 2x500 runs ({injected} injected, {replayed} replayed datagrams)")


# 6 ------------------------------------------------------------------------------

def test_active_probing():
    server = build_server(SHORT, random.Random(6))
    reports = [probe_driver(NetProfile(seed=6), SHORT, kind, n, server=server)
               for kind, n in (("random", 334), ("replay", 333), ("dig", 333))]
    probes = sum(r.probes for r in reports)
    wellformed = sum(r.wellformed for r in reports)
    accepts = sum(r.accepts for r in reports)
    honest = run_scenario(NetProfile(seed=99), SHORT, server=server, start=10_000.0)
    ok = (probes == 1000 and wellformed == probes and accepts == 0
          and all(r.responsive_after for r in reports) and honest.success)
    verdict("6 active probing", ok,
            f"{wellformed}/{probes} well-formed answers, {accepts} inner accepts, "
            f"honest handshake afterwards: {'ok' if honest.success else 'failed'}")


# 7 ------------------------------------------------------------------------------

def test_codec_oracle():
    rng = random.Random(7)
    mismatches = flips = 0
    for _ in range(100_000):
        data = rng.randbytes(rng.randint(0, 64))
        text = encode_b32(data)
        if text != ref_b32encode(data) or decode_b32(text) != data or ref_b32decode(text) != data:
            mismatches += 1
        flipped = "".join(c.upper() if rng.random() < 0.5 else c for c in text)
        flips += decode_b32(flipped) != data
    verdict("7 codec oracle", mismatches == 0 and flips == 0,
            f"{mismatches} oracle mismatches, {flips} case-flip failures over 100000 inputs")


# 8 ------------------------------------------------------------------------------

def test_wire_validity():
    msgs = [bytes.fromhex(json.loads(line)["hex"]) for line in GOLDEN.read_text().splitlines()]
    bad = 0
    for wire in msgs:
        try:
            theirs = dns.message.from_wire(wire)
            ours = dnswire.parse_message(wire)
            if theirs.id != ours.qid or len(theirs.question) != len(ours.questions):
                bad += 1
        except Exception:  # noqa: BLE001
            bad += 1
    verdict("8 wire validity", bad == 0 and len(msgs) > 40,
            f"{len(msgs) - bad}/{len(msgs)} golden messages parsed by dnspython")


# 9 ------------------------------------------------------------------------------

def test_end_to_end():
    async def go():
        cfg = dataclasses.replace(SHORT, udp_port=0, tcp_port=0)
        bridge = await BridgeServer(cfg).start()
        cfg = dataclasses.replace(cfg, udp_port=bridge.udp_address[1], tcp_port=bridge.tcp_address[1])
        try:
            result = await open_tunnel(cfg)
            blob = os.urandom(1 << 20)
            reader = asyncio.ensure_future(result.tunnel.recv_exactly(len(blob)))
            await result.tunnel.send(blob)
            echoed = await asyncio.wait_for(reader, 30)
            result.tunnel.close()

            wrong = dataclasses.replace(cfg, password=b"wrong shared secret value")
            denied = await run_handshake(wrong, deadline=20)
            rogue = await handover.connect("127.0.0.1", cfg.tcp_port, derive_session_keys(os.urandom(32)))
            rogue_reply = await asyncio.wait_for(rogue.reader.read(), 15)
            return echoed == blob, denied.success, rogue_reply, bridge.rejected
        finally:
            await bridge.close()

    identical, wrong_ok, rogue_reply, rejected = asyncio.run(go())
    ok = identical and not wrong_ok and rogue_reply == b"" and rejected == 1
    verdict("9 end to end", ok,
            f"1 MiB echo {'identical' if identical else 'differs'}; wrong-password handshake "
            f"{'accepted' if wrong_ok else 'failed'}; rogue TCP client got {len(rogue_reply)} bytes and was closed")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
