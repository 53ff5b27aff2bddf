"""Out-of-band transport-metric feedback over UDP.

Wire layout, network byte order::

    0      2         3        4             5          6                10
    +------+---------+--------+-------------+----------+-----------------+------+
    | AF53 | version | family | metric_kind | name_len | metric_value_us | name |
    +------+---------+--------+-------------+----------+-----------------+------+

``family`` is 4 or 6, ``metric_kind`` 0 is the connection handshake time and
``name`` is ``name_len`` bytes of UTF-8. A datagram is exactly
``10 + name_len`` bytes long.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import struct
from collections import Counter
from dataclasses import dataclass

from afsel.exp3 import AddressFamily
from afsel.steering import SteeringRegistry

logger = logging.getLogger(__name__)

MAGIC = b"\xaf\x53"
VERSION = 1
KIND_HANDSHAKE = 0
HEADER = struct.Struct("!2sBBBBI")
MAX_NAME = 255
MAX_VALUE_US = 0xFFFFFFFF


class FeedbackError(ValueError):
    """Datagram rejected during decoding."""


class BadMagic(FeedbackError):
    pass


class BadVersion(FeedbackError):
    pass


class BadFamily(FeedbackError):
    pass


class LengthMismatch(FeedbackError):
    pass


class BadName(FeedbackError):
    pass


@dataclass(frozen=True)
class FeedbackMessage:
    family: int
    metric_value_us: int
    name: str
    metric_kind: int = KIND_HANDSHAKE
    version: int = VERSION

    @property
    def address_family(self) -> AddressFamily:
        return AddressFamily(self.family)

    @property
    def metric_ms(self) -> float:
        return self.metric_value_us / 1000.0

    @classmethod
    def handshake(cls, name: str, family, ms: float) -> "FeedbackMessage":
        return cls(AddressFamily.parse(family).value, int(round(ms * 1000)), name)


def encode(msg: FeedbackMessage) -> bytes:
    name = msg.name.encode("utf-8")
    if not name:
        raise BadName("name must not be empty")
    if len(name) > MAX_NAME:
        raise LengthMismatch(f"name is {len(name)} bytes, at most {MAX_NAME} allowed")
    if msg.family not in (4, 6):
        raise BadFamily(f"family must be 4 or 6, got {msg.family}")
    if not 0 <= msg.metric_value_us <= MAX_VALUE_US:
        raise ValueError(f"metric value {msg.metric_value_us} does not fit 32 bits")
    if not (0 <= msg.version <= 255 and 0 <= msg.metric_kind <= 255):
        raise ValueError("version and metric_kind are single bytes")
    header = HEADER.pack(MAGIC, msg.version, msg.family, msg.metric_kind, len(name), msg.metric_value_us)
    return header + name


def decode(data: bytes) -> FeedbackMessage:
    if len(data) < HEADER.size:
        raise LengthMismatch(f"datagram of {len(data)} bytes is shorter than the header")
    magic, version, family, kind, name_len, value = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic.hex()}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if family not in (4, 6):
        raise BadFamily(f"bad family {family}")
    if len(data) != HEADER.size + name_len:
        raise LengthMismatch(f"name_len {name_len} but {len(data) - HEADER.size} name bytes")
    if name_len == 0:
        raise BadName("empty name")
    try:
        name = data[HEADER.size:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadName(str(exc)) from None
    return FeedbackMessage(family, value, name, kind, version)


def apply_feedback(msg: FeedbackMessage, registry: SteeringRegistry):
    """Reward the group of ``msg.name`` for the family the sender reports.

    Every message is one event: duplicates are applied again. Returns the gain,
    or ``None`` when the message carries nothing usable.
    """
    if msg.metric_kind != KIND_HANDSHAKE:
        logger.debug("ignoring metric kind %d for %s", msg.metric_kind, msg.name)
        return None
    if msg.metric_value_us == 0:
        logger.debug("ignoring zero metric for %s", msg.name)
        return None
    try:
        key = registry.key_for(msg.name)
    except ValueError:
        return None
    return registry.reward(key, msg.address_family, msg.metric_ms)


class FeedbackProtocol(asyncio.DatagramProtocol):
    """Decode datagrams and feed them to the registry; bad ones are counted."""

    def __init__(self, registry: SteeringRegistry):
        self.registry = registry
        self.received = 0
        self.applied = 0
        self.dropped: Counter = Counter()

    def datagram_received(self, data: bytes, addr) -> None:
        self.received += 1
        try:
            msg = decode(data)
        except FeedbackError as exc:
            self.dropped[type(exc).__name__] += 1
            logger.debug("dropped feedback from %s: %s", addr, exc)
            return
        if apply_feedback(msg, self.registry) is None:
            self.dropped["Ignored"] += 1
        else:
            self.applied += 1


def send_feedback(msg: FeedbackMessage, target) -> int:
    """Send one encoded message to ``target`` (host, port); returns bytes sent."""
    data = encode(msg)
    host, port = target
    family = socket.AF_INET6 if ":" in host else socket.AF_INET
    with socket.socket(family, socket.SOCK_DGRAM) as sock:
        return sock.sendto(data, (host, port))
