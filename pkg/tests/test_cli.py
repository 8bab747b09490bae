"""Configuration handling and the command line."""

import json
import subprocess
import sys

import pytest

from dnsmorph.cli import build_parser, config_from_args, main
from dnsmorph.config import ConfigError, TunnelConfig, parse_config_text, parse_hostport, parse_password

PW = "cli test password 0123"


class TestConfig:
    def test_hex_password(self):
        assert parse_password("hex:00ff") == b"\x00\xff"
        assert parse_password("plain") == b"plain"
        with pytest.raises(ConfigError):
            parse_password("hex:zz")

    def test_hostport(self):
        assert parse_hostport("10.0.0.1:5300") == ("10.0.0.1", 5300)
        assert parse_hostport("resolver.example") == ("resolver.example", 53)
        assert parse_hostport("[::1]:53") == ("::1", 53)

    def test_indirect_needs_resolver(self):
        with pytest.raises(ConfigError):
            TunnelConfig(password=b"x" * 16, mode="indirect").validate()

    def test_indirect_target(self):
        cfg = TunnelConfig(password=b"x" * 16, mode="indirect", resolver=("9.9.9.9", 53)).validate()
        assert cfg.query_target == ("9.9.9.9", 53)

    def test_pad_max_reaches_inner(self):
        assert TunnelConfig(pad_max=1308).inner.pad_max == 1308

    def test_bad_domain(self):
        with pytest.raises(ConfigError):
            TunnelConfig(password=b"x" * 16, domain="-bad-.example").validate()

    def test_file_format(self):
        values = parse_config_text("# comment\npassword = hex:6162\nudp-port=5300\nresolver=1.2.3.4\n")
        assert values == {"password": b"ab", "udp_port": 5300, "resolver": ("1.2.3.4", 53)}

    def test_file_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("colour=blue\n")

    def test_seeded_rng(self):
        a, b = TunnelConfig(seed=3).rng(), TunnelConfig(seed=3).rng()
        assert a.random() == b.random()


class TestFlags:
    def test_round_trip(self):
        args = build_parser().parse_args([
            "client", "--password", PW, "--domain", "tunnel.example.org", "--mode", "indirect",
            "--resolver", "8.8.8.8:53", "--udp-port", "5300", "--tcp-port", "9000", "--pad-max", "1308",
            "--decoy-http", "8080", "--seed", "4"])
        cfg = config_from_args(args).validate()
        assert (cfg.password, cfg.domain, cfg.mode, cfg.resolver) == (PW.encode(), "tunnel.example.org", "indirect",
                                                                     ("8.8.8.8", 53))
        assert (cfg.udp_port, cfg.tcp_port, cfg.pad_max, cfg.decoy_http, cfg.seed) == (5300, 9000, 1308, 8080, 4)

    def test_flags_override_file(self, tmp_path):
        f = tmp_path / "c.conf"
        f.write_text(f"password={PW}\npad_max=1308\n")
        args = build_parser().parse_args(["server", "--config", str(f), "--pad-max", "100"])
        cfg = config_from_args(args)
        assert cfg.pad_max == 100 and cfg.password == PW.encode()

    def test_indirect_without_resolver_exits(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["client", "--password", PW, "--mode", "indirect"])
        assert exc.value.code == 2
        assert "resolver" in capsys.readouterr().err


class TestCommands:
    def test_sim_seed_reproduces(self, capsys):
        main(["sim", "--password", PW, "--seed", "11"])
        first = json.loads(capsys.readouterr().out)
        main(["sim", "--password", PW, "--seed", "11"])
        second = json.loads(capsys.readouterr().out)
        assert first["digest"] == second["digest"] and first["success"]

    def test_sim_exports(self, tmp_path, capsys):
        t, p = tmp_path / "t.ndjson", tmp_path / "p.txt"
        assert main(["sim", "--password", PW, "--seed", "1", "--transcript-out", str(t), "--prefixes-out", str(p)]) == 0
        assert t.read_text().count("\n") == json.loads(capsys.readouterr().out)["datagrams"]
        assert all(len(line) > 5 for line in p.read_text().splitlines())

    def test_bench_zero_runs(self, capsys):
        assert main(["bench", "--password", PW, "--runs", "0", "--target", "simnet", "--out", "json"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["runs"] == [] and out["summary"]["runs"] == 0

    def test_bench_writes_figure(self, tmp_path, capsys):
        out = tmp_path / "report.csv"
        assert main(["bench", "--password", PW, "--runs", "3", "--target", "simnet", "--seed", "2",
                     "--out-file", str(out)]) == 0
        assert out.read_text().startswith("run,success,seconds")
        png = out.with_suffix(".png")
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_entropy_check(self, tmp_path, capsys):
        f = tmp_path / "c.txt"
        f.write_text("a" * 1000)
        assert main(["entropy-check", str(f)]) == 0
        assert json.loads(capsys.readouterr().out)["deflate_ratio"] < 0.05

    def test_entropy_empty(self, tmp_path, capsys):
        f = tmp_path / "empty.txt"
        f.write_text("")
        assert main(["entropy-check", str(f)]) == 2

    def test_console_script_loopback(self):
        proc = subprocess.run([sys.executable, "-m", "dnsmorph.cli", "bench", "--password", PW, "--runs", "2",
                               "--out", "json", "--seed", "1"], capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0
        assert json.loads(proc.stdout)["summary"]["success_rate"] == 1.0
