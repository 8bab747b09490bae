"""Command line: ``server``, ``client``, ``sim``, ``bench`` and ``entropy-check``."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, TunnelConfig, load_config_file, parse_hostport, parse_password
from .innerproto import ORIGINAL_PAD_MAX, SHORT_PAD_MAX

log = logging.getLogger("dnsmorph")

# argparse dest -> TunnelConfig field, for flags that map one-to-one
_FLAG_FIELDS = {
    "password": "password", "domain": "domain", "mode": "mode", "resolver": "resolver",
    "server": "server_host", "listen": "listen_host", "udp_port": "udp_port", "tcp_port": "tcp_port",
    "pad_max": "pad_max", "decoy_ip": "decoy_ip", "decoy_http": "decoy_http", "ttl": "ttl",
    "local_dns": "local_dns", "forward": "forward_to", "upstream": "upstream",
    "local_port": "local_port", "pacing": "pacing", "seed": "seed",
}


def _tunnel_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tunnel")
    g.add_argument("--config", help="key=value config file; flags override it")
    g.add_argument("--password", type=parse_password, help="shared secret; 'hex:...' for raw bytes")
    g.add_argument("--domain", help="bridge domain (default bridge.domain)")
    g.add_argument("--mode", choices=("direct", "indirect"))
    g.add_argument("--resolver", type=parse_hostport, help="recursive resolver host[:port] for indirect mode")
    g.add_argument("--server", help="bridge address for direct mode and the TCP handover")
    g.add_argument("--listen", help="address the bridge binds")
    g.add_argument("--udp-port", type=int)
    g.add_argument("--tcp-port", type=int)
    g.add_argument("--pad-max", type=int, help=f"{SHORT_PAD_MAX} (shortened) or {ORIGINAL_PAD_MAX} (original)")
    g.add_argument("--decoy-ip", help="address returned in A answers")
    g.add_argument("--decoy-http", type=int, metavar="PORT", help="serve the decoy web page on this port")
    g.add_argument("--ttl", type=int)
    g.add_argument("--local-dns", choices=("embedded", "forward"))
    g.add_argument("--forward", type=parse_hostport, help="resolver for --local-dns forward")
    g.add_argument("--upstream", type=lambda v: parse_hostport(v, 0), help="where the bridge relays tunnels")
    g.add_argument("--local-port", type=int, help="client plaintext listener port")
    g.add_argument("--pacing", type=float, help="seconds between dummy queries")
    g.add_argument("--seed", type=int, help="deterministic randomness (tests only)")


def config_from_args(args: argparse.Namespace) -> TunnelConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for dest, attr in _FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[attr] = v
    return TunnelConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnsmorph", description="Handshake shaping over DNS for pluggable transports")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("server", help="run the bridge")
    _tunnel_flags(p)

    p = sub.add_parser("client", help="run the client")
    _tunnel_flags(p)
    p.add_argument("--handshake-only", action="store_true", help="do one handshake, print its stats and exit")

    p = sub.add_parser("sim", help="run handshakes through the simulated network")
    _tunnel_flags(p)
    _profile_flags(p)
    p.add_argument("--transcript-out", help="write the first run's transcript as NDJSON")
    p.add_argument("--prefixes-out", help="write the first run's query prefixes, one per line")

    p = sub.add_parser("bench", help="measure handshake time and bandwidth")
    _tunnel_flags(p)
    _profile_flags(p)
    p.add_argument("--target", choices=("loopback", "simnet"), default="loopback")
    p.add_argument("--out", choices=("csv", "json"), default="csv")
    p.add_argument("--out-file", help="write the report here (plus a .png figure) instead of stdout")
    p.add_argument("--parallel", type=int, default=1, help="worker threads for the simnet target")

    p = sub.add_parser("entropy-check", help="compression ratios of a prefix corpus")
    p.add_argument("corpus", help="file with one domain-name prefix per line")
    return parser


def _profile_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network")
    g.add_argument("--runs", type=int, default=1)
    g.add_argument("--drop", type=float, default=0.0, help="loss probability per datagram")
    g.add_argument("--dup", type=float, default=0.0)
    g.add_argument("--reorder", type=float, default=0.0)
    g.add_argument("--adversary", action="append", default=[],
                   choices=("case_flip", "inject_random", "replay_capture"))


def _profile(args: argparse.Namespace, seed: Optional[int]):
    from .simnet import NetProfile

    return NetProfile(drop_p=args.drop, dup_p=args.dup, reorder_p=args.reorder,
                      adversaries=tuple(args.adversary), seed=seed or 0)


# -- commands -----------------------------------------------------------------

def cmd_server(args, cfg: TunnelConfig) -> int:
    from .bridge import BindFailure, serve

    try:
        asyncio.run(serve(cfg))
    except BindFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_client(args, cfg: TunnelConfig) -> int:
    from .client import open_tunnel, serve_local

    if not args.handshake_only:
        asyncio.run(serve_local(cfg))
        return 0

    async def once():
        result = await open_tunnel(cfg)
        if result.tunnel is not None:
            result.tunnel.close()
        return result

    result = asyncio.run(once())
    print(json.dumps({"success": result.tunnel is not None, "seconds": result.seconds,
                      "bandwidth": result.bandwidth, "datagrams_sent": result.stats.datagrams_sent,
                      "datagrams_received": result.stats.datagrams_received,
                      "failure": str(result.failure) if result.failure else None}))
    return 0 if result.tunnel is not None else 1


def cmd_sim(args, cfg: TunnelConfig) -> int:
    from .simnet import check_transcript, run_scenario

    profile = _profile(args, cfg.seed)
    failures = 0
    for i in range(args.runs):
        tr = run_scenario(profile.with_seed(profile.seed + i), cfg)
        violations = check_transcript(tr, cfg.password)
        failures += (not tr.success) or bool(violations)
        print(json.dumps({"run": i, "success": tr.success, "reason": tr.reason, "datagrams": tr.datagrams,
                          "bandwidth": tr.bandwidth, "elapsed": round(tr.elapsed, 6),
                          "digest": tr.digest(), "violations": violations}))
        if i == 0 and args.transcript_out:
            tr.write_ndjson(args.transcript_out)
        if i == 0 and args.prefixes_out:
            Path(args.prefixes_out).write_text("".join(label + "\n" for label in tr.client_labels()))
    return 1 if failures else 0


def cmd_bench(args, cfg: TunnelConfig) -> int:
    from .bench import bench

    report = bench(args.runs, cfg, args.target, profile=_profile(args, cfg.seed), parallel=args.parallel)
    text = report.render(args.out)
    if args.out_file:
        Path(args.out_file).write_text(text)
        if report.rows:
            from .report import figure_path, plot_report

            plot_report(report, figure_path(args.out_file))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    print(json.dumps(report.summary()), file=sys.stderr)
    return 0


def cmd_entropy(args) -> int:
    from .bench import EmptyCorpus, entropy_check

    try:
        result = entropy_check(args.corpus)
    except EmptyCorpus as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "entropy-check":
        return cmd_entropy(args)
    try:
        cfg = config_from_args(args).validate()
    except ConfigError as exc:
        parser.error(str(exc))
    handlers = {"server": cmd_server, "client": cmd_client, "sim": cmd_sim, "bench": cmd_bench}
    try:
        return handlers[args.command](args, cfg)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
