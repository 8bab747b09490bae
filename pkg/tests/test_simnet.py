"""Simulated network, censor transforms and the probe driver."""

import json

import pytest

from dnsmorph.config import TunnelConfig
from dnsmorph.simnet import NetProfile, build_server, check_transcript, probe_driver, run_scenario

CFG = TunnelConfig(password=b"simnet test password")


class TestProfile:
    def test_probability_range(self):
        with pytest.raises(ValueError):
            NetProfile(drop_p=1.5)

    def test_unknown_adversary(self):
        with pytest.raises(ValueError):
            NetProfile(adversaries=("dns_poison",))

    def test_with_seed(self):
        p = NetProfile(drop_p=0.2, adversaries=("case_flip",)).with_seed(9)
        assert p.seed == 9 and p.drop_p == 0.2 and p.adversaries == ("case_flip",)


class TestScenario:
    def test_lossless(self):
        tr = run_scenario(NetProfile(seed=1), CFG)
        assert tr.success and 26 <= tr.datagrams <= 96
        assert check_transcript(tr, CFG.password) == []

    def test_original_padding(self):
        cfg = TunnelConfig(password=CFG.password, pad_max=1308)
        tr = run_scenario(NetProfile(seed=1), cfg)
        assert tr.success and tr.datagrams <= 458

    def test_determinism(self):
        p = NetProfile(drop_p=0.1, dup_p=0.05, reorder_p=0.2, adversaries=("case_flip", "inject_random"), seed=42)
        assert run_scenario(p, CFG).digest() == run_scenario(p, CFG).digest()

    def test_seeds_differ(self):
        assert run_scenario(NetProfile(seed=1), CFG).digest() != run_scenario(NetProfile(seed=2), CFG).digest()

    def test_total_loss(self):
        tr = run_scenario(NetProfile(drop_p=1.0, seed=3), CFG)
        assert not tr.success and tr.reason == "timeout"
        assert check_transcript(tr, CFG.password) == []

    def test_duplication_and_reordering(self):
        for seed in range(20):
            tr = run_scenario(NetProfile(dup_p=0.3, reorder_p=0.5, seed=seed), CFG)
            assert tr.success and not tr.corrupted
            assert check_transcript(tr, CFG.password) == []

    def test_case_flip(self):
        for seed in range(20):
            tr = run_scenario(NetProfile(adversaries=("case_flip",), seed=seed), CFG)
            assert tr.success

    def test_injection_never_corrupts(self):
        for seed in range(30):
            tr = run_scenario(NetProfile(adversaries=("inject_random",), inject_p=0.5, seed=seed), CFG)
            assert not tr.corrupted
            assert any(r.origin == "adversary" for r in tr.records)

    def test_replay_never_corrupts(self):
        for seed in range(30):
            tr = run_scenario(NetProfile(adversaries=("replay_capture",), replay_p=0.5, seed=seed), CFG)
            assert not tr.corrupted

    def test_ndjson_export(self, tmp_path):
        tr = run_scenario(NetProfile(seed=5), CFG)
        path = tmp_path / "t.ndjson"
        tr.write_ndjson(path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == tr.datagrams
        assert set(rows[0]) >= {"t", "dir", "bytes_hex"}
        assert bytes.fromhex(rows[0]["bytes_hex"]) == tr.sends()[0].data

    def test_shared_server(self):
        import random

        server = build_server(CFG, random.Random(0))
        t = 0.0
        for seed in range(3):
            tr = run_scenario(NetProfile(seed=seed), CFG, server=server, start=t)
            assert tr.success
            t += tr.elapsed + 1.0


class TestProbes:
    @pytest.mark.parametrize("kind", ["random", "replay", "dig"])
    def test_kinds(self, kind):
        report = probe_driver(NetProfile(seed=0), CFG, kind, n=200)
        assert report.all_answered and report.accepts == 0 and report.responsive_after

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            probe_driver(NetProfile(), CFG, "portscan", n=1)
