"""Shape a pluggable transport's handshake as DNS traffic, then hand over to TCP."""

from .codec import decode_b32, encode_b32, fragment, reassemble
from .config import ConfigError, TunnelConfig
from .innerproto import MockScrambleSuit, MockScrambleSuitConfig, SessionKeys
from .session import BridgeCore, ClientHandshake, HandshakeFailure

__all__ = [
    "BridgeCore", "ClientHandshake", "ConfigError", "HandshakeFailure", "MockScrambleSuit",
    "MockScrambleSuitConfig", "SessionKeys", "TunnelConfig", "decode_b32", "encode_b32",
    "fragment", "reassemble",
]

__version__ = "0.1.0"
