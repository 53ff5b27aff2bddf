"""Destination grouping and the per-group bandit registry."""

from __future__ import annotations

import ipaddress
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

from afsel.exp3 import AddressFamily, Exp3State, RewardContext, compute_gain, exp3_new

_V4_MAPPED_PREFIX = b"\x00" * 10 + b"\xff\xff"


def normalize_name(name: str) -> str:
    return str(name).strip().rstrip(".").lower()


def load_suffixes(path) -> frozenset:
    """Read a public-suffix file: one suffix per line, ``//`` comments allowed.

    Wildcard (``*.``) and exception (``!``) markers are stripped, which is
    coarser than the full public-suffix algorithm but enough for grouping.
    """
    suffixes = set()
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.split("//", 1)[0].strip()
            if not line:
                continue
            line = line.lstrip("!")
            if line.startswith("*."):
                line = line[2:]
            suffixes.add(normalize_name(line))
    return frozenset(s for s in suffixes if s)


def group_key(name: str, suffixes: Iterable[str] = ()) -> str:
    """Second-level domain of ``name``, one label below the longest listed suffix."""
    labels = [label for label in normalize_name(name).split(".")]
    if not labels or labels == [""] or any(not label for label in labels):
        raise ValueError(f"invalid domain name: {name!r}")
    suffixes = suffixes if isinstance(suffixes, (set, frozenset)) else set(suffixes)
    keep = 2
    for i in range(len(labels)):
        if ".".join(labels[i:]) in suffixes:
            keep = max(keep, len(labels) - i + 1)
            break
    return ".".join(labels[-keep:])


def map_v4_to_v6(addr) -> ipaddress.IPv6Address:
    """IPv4-mapped IPv6 address (``::ffff:a.b.c.d``)."""
    v4 = ipaddress.IPv4Address(addr)
    return ipaddress.IPv6Address(_V4_MAPPED_PREFIX + v4.packed)


@dataclass
class GroupState:
    bandit: Exp3State
    ctx: RewardContext = field(default_factory=RewardContext)
    pending: Optional[AddressFamily] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


class SteeringRegistry:
    """One EXP3 instance and reward context per destination group.

    Group entries are mutated under their own lock; the registry lock only
    guards creation.
    """

    def __init__(self, gamma: float = 0.1, suffixes: Iterable[str] = ()):
        exp3_new(gamma)
        self.gamma = gamma
        self.suffixes = frozenset(normalize_name(s) for s in suffixes)
        self._groups: Dict[str, GroupState] = {}
        self._lock = threading.Lock()

    def key_for(self, name: str) -> str:
        return group_key(name, self.suffixes)

    def group(self, key: str) -> GroupState:
        with self._lock:
            state = self._groups.get(key)
            if state is None:
                state = self._groups[key] = GroupState(exp3_new(self.gamma))
            return state

    def get(self, key: str) -> Optional[GroupState]:
        with self._lock:
            return self._groups.get(key)

    def keys(self):
        with self._lock:
            return sorted(self._groups)

    def choose(self, key: str, uniform_sample: float) -> Tuple[AddressFamily, Tuple[float, float]]:
        """Pick a family for ``key`` and remember it as the pending choice."""
        group = self.group(key)
        with group.lock:
            probs = group.bandit.probabilities()
            family = group.bandit.choose(uniform_sample)
            group.pending = family
        return family, probs

    def reward(self, key: str, family: AddressFamily, metric_ms: float) -> float:
        """Turn one latency observation into a bandit update; returns the gain."""
        group = self.group(key)
        with group.lock:
            gain, group.ctx = compute_gain(family, metric_ms, group.ctx)
            group.bandit = group.bandit.update(family, gain)
        return gain

    def probabilities(self, key: str) -> Tuple[float, float]:
        group = self.group(key)
        with group.lock:
            return group.bandit.probabilities()
