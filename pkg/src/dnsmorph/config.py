"""Tunnel configuration shared by the client, the bridge and the tools."""

from __future__ import annotations

import dataclasses
import ipaddress
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import dnswire
from .innerproto import ORIGINAL_PAD_MAX, SHORT_PAD_MAX, MockScrambleSuitConfig

log = logging.getLogger(__name__)

MODES = ("direct", "indirect")
MIN_PASSWORD_LEN = 16


class ConfigError(ValueError):
    pass


def parse_password(value: str) -> bytes:
    """``hex:<digits>`` for raw key bytes, anything else is a UTF-8 passphrase."""
    if value.startswith("hex:"):
        try:
            return bytes.fromhex(value[4:])
        except ValueError as exc:
            raise ConfigError(f"bad hex password: {exc}") from None
    return value.encode("utf-8")


def parse_hostport(value: str, default_port: int = 53) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep:
        return value, default_port
    try:
        return host.strip("[]"), int(port)
    except ValueError:
        raise ConfigError(f"bad port in {value!r}") from None


@dataclass
class TunnelConfig:
    password: bytes = b""
    domain: str = "bridge.domain"
    mode: str = "direct"
    resolver: Optional[tuple[str, int]] = None
    server_host: str = "127.0.0.1"
    listen_host: str = "127.0.0.1"
    udp_port: int = 5353
    tcp_port: int = 9443
    pad_max: int = SHORT_PAD_MAX
    decoy_ip: str = "192.0.2.1"
    decoy_http: Optional[int] = None
    ttl: int = dnswire.DEFAULT_TTL
    local_dns: str = "embedded"
    forward_to: Optional[tuple[str, int]] = None
    upstream: Optional[tuple[str, int]] = None
    local_port: int = 1080
    pacing: float = 0.0
    seed: Optional[int] = None
    inner: MockScrambleSuitConfig = field(default_factory=MockScrambleSuitConfig)

    def __post_init__(self):
        if self.inner.pad_max != self.pad_max:
            self.inner = dataclasses.replace(self.inner, pad_max=self.pad_max)

    def validate(self) -> "TunnelConfig":
        if not self.password:
            raise ConfigError("a shared password is required")
        if len(self.password) < MIN_PASSWORD_LEN:
            log.warning("shared password shorter than %d bytes", MIN_PASSWORD_LEN)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "indirect" and self.resolver is None:
            raise ConfigError("indirect mode requires --resolver")
        if self.local_dns not in ("embedded", "forward"):
            raise ConfigError("local DNS must be 'embedded' or 'forward'")
        if self.local_dns == "forward" and self.forward_to is None:
            raise ConfigError("forwarding local DNS requires a resolver address")
        if self.pad_max not in (SHORT_PAD_MAX, ORIGINAL_PAD_MAX):
            log.warning("pad_max %d is neither the shortened nor the original setting", self.pad_max)
        for port in (self.udp_port, self.tcp_port):
            if not 0 <= port <= 65535:
                raise ConfigError(f"port {port} out of range")
        try:
            ipaddress.IPv4Address(self.decoy_ip)
        except ValueError:
            raise ConfigError(f"decoy address {self.decoy_ip!r} is not IPv4") from None
        try:
            self.domain = dnswire.validate_domain(self.domain)
        except dnswire.DnsWireError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def rng(self, salt: int = 0) -> random.Random:
        """Seeded generator for tests; system entropy otherwise."""
        if self.seed is None:
            return random.Random(os.urandom(16))
        return random.Random(self.seed * 1_000_003 + salt)

    @property
    def query_target(self) -> tuple[str, int]:
        if self.mode == "indirect":
            return self.resolver
        return self.server_host, self.udp_port


# key=value names accepted in config files, mapped to how they are parsed
_FILE_KEYS = {
    "password": ("password", parse_password),
    "domain": ("domain", str),
    "mode": ("mode", str),
    "resolver": ("resolver", parse_hostport),
    "server": ("server_host", str),
    "listen": ("listen_host", str),
    "udp_port": ("udp_port", int),
    "tcp_port": ("tcp_port", int),
    "pad_max": ("pad_max", int),
    "decoy_ip": ("decoy_ip", str),
    "decoy_http": ("decoy_http", int),
    "ttl": ("ttl", int),
    "local_dns": ("local_dns", str),
    "forward": ("forward_to", parse_hostport),
    "upstream": ("upstream", lambda v: parse_hostport(v, 0)),
    "local_port": ("local_port", int),
    "pacing": ("pacing", float),
    "seed": ("seed", int),
}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _FILE_KEYS:
            raise ConfigError(f"line {lineno}: expected one of {sorted(_FILE_KEYS)} as key=value")
        attr, conv = _FILE_KEYS[key]
        try:
            values[attr] = conv(value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return values


def load_config_file(path: str | Path) -> dict:
    return parse_config_text(Path(path).read_text())
