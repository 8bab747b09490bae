"""Handshake benchmarks and the qname compressibility check."""

from __future__ import annotations

import asyncio
import bz2
import csv
import dataclasses
import gzip
import io
import json
import logging
import random
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .bridge import BridgeServer
from .client import open_tunnel
from .config import TunnelConfig
from .simnet import NetProfile, run_scenario

log = logging.getLogger(__name__)

ROW_FIELDS = ("run", "success", "seconds", "bandwidth", "datagrams", "reason")


class EmptyCorpus(ValueError):
    pass


@dataclass
class BenchRow:
    run: int
    success: bool
    seconds: float
    bandwidth: int
    datagrams: int
    reason: str = ""


@dataclass
class BenchReport:
    target: str
    pad_max: int
    rows: list[BenchRow] = field(default_factory=list)

    @property
    def successes(self) -> list[BenchRow]:
        return [r for r in self.rows if r.success]

    def summary(self) -> dict:
        ok = self.successes
        times = [r.seconds for r in ok]

        def stat(fn, values):
            return fn(values) if values else None

        return {
            "target": self.target,
            "pad_max": self.pad_max,
            "runs": len(self.rows),
            "success_rate": len(ok) / len(self.rows) if self.rows else None,
            # timing and size statistics cover successful handshakes only
            "min": stat(min, times),
            "max": stat(max, times),
            "avg": stat(statistics.fmean, times),
            "median": stat(statistics.median, times),
            "bandwidth": stat(statistics.fmean, [r.bandwidth for r in ok]),
            "datagrams": stat(statistics.fmean, [r.datagrams for r in ok]),
        }

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "runs": [dataclasses.asdict(r) for r in self.rows]}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(dataclasses.asdict(r))
        return buf.getvalue()

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return self.to_json()
        if fmt == "csv":
            return self.to_csv()
        raise ValueError(f"unknown report format {fmt!r}")


def read_csv_rows(text: str) -> list[BenchRow]:
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        rows.append(BenchRow(int(d["run"]), d["success"] == "True", float(d["seconds"]),
                             int(d["bandwidth"]), int(d["datagrams"]), d["reason"]))
    return rows


# -- targets --------------------------------------------------------------------

async def _loopback_runs(n_runs: int, cfg: TunnelConfig, rng: random.Random) -> list[BenchRow]:
    server_cfg = dataclasses.replace(cfg, listen_host="127.0.0.1", udp_port=0, tcp_port=0, decoy_http=None,
                                     local_dns="embedded")
    bridge = await BridgeServer(server_cfg, rng=random.Random(rng.getrandbits(64))).start()
    client_cfg = dataclasses.replace(cfg, mode="direct", server_host="127.0.0.1",
                                     udp_port=bridge.udp_address[1], tcp_port=bridge.tcp_address[1])
    rows = []
    try:
        for i in range(n_runs):
            bridge.core.reset()  # every run starts from empty session state
            result = await open_tunnel(client_cfg, random.Random(rng.getrandbits(64)))
            if result.tunnel is not None:
                result.tunnel.close()
                await result.tunnel.wait_closed()
            rows.append(BenchRow(i, result.tunnel is not None, result.seconds, result.bandwidth,
                                 result.stats.datagrams_sent + result.stats.datagrams_received,
                                 "" if result.tunnel is not None else str(result.failure)))
    finally:
        await bridge.close()
    return rows


def _simnet_run(i: int, profile: NetProfile, cfg: TunnelConfig) -> BenchRow:
    tr = run_scenario(profile.with_seed(profile.seed * 100_003 + i), cfg)
    return BenchRow(i, tr.success, tr.elapsed, tr.bandwidth, tr.datagrams, tr.reason or "")


def bench(n_runs: int, cfg: TunnelConfig, target: str = "loopback", profile: Optional[NetProfile] = None,
          parallel: int = 1) -> BenchReport:
    """Run ``n_runs`` fresh handshakes; failures are recorded, never raised."""
    report = BenchReport(target, cfg.pad_max)
    if n_runs <= 0:
        return report
    if target == "loopback":
        report.rows = asyncio.run(_loopback_runs(n_runs, cfg, cfg.rng(salt=2)))
    elif target == "simnet":
        profile = profile or NetProfile(seed=cfg.seed or 0)
        if parallel > 1:
            with ThreadPoolExecutor(parallel) as pool:
                report.rows = list(pool.map(lambda i: _simnet_run(i, profile, cfg), range(n_runs)))
        else:
            report.rows = [_simnet_run(i, profile, cfg) for i in range(n_runs)]
    else:
        raise ValueError(f"unknown bench target {target!r}")
    return report


# -- compressibility -------------------------------------------------------------

def compression_ratios(data: bytes) -> dict:
    if not data:
        raise EmptyCorpus("corpus is empty")
    return {
        "deflate_ratio": len(gzip.compress(data, compresslevel=9, mtime=0)) / len(data),
        "block_ratio": len(bz2.compress(data, 9)) / len(data),
    }


def entropy_check(path: str | Path) -> dict:
    """Compression ratios of a file holding one domain-name prefix per line."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise EmptyCorpus(f"{path} holds no prefixes")
    result = compression_ratios("\n".join(lines).encode() + b"\n")
    result["prefixes"] = len(lines)
    return result
