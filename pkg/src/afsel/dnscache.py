"""A and AAAA record cache with per-record expiry and negative entries."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple

from afsel.exp3 import AddressFamily
from afsel.steering import normalize_name

NEGATIVE_TTL_DEFAULT = 30


@dataclass
class CachedAddress:
    address: str
    expires: float


@dataclass
class DnsCacheEntry:
    name: str
    a_records: List[CachedAddress] = field(default_factory=list)
    aaaa_records: List[CachedAddress] = field(default_factory=list)
    # Negative caching: the family is known to have no records until then.
    a_empty_until: Optional[float] = None
    aaaa_empty_until: Optional[float] = None

    def records(self, family: AddressFamily) -> List[CachedAddress]:
        return self.a_records if family is AddressFamily.V4 else self.aaaa_records

    def _prune(self, now: float) -> None:
        self.a_records = [r for r in self.a_records if r.expires > now]
        self.aaaa_records = [r for r in self.aaaa_records if r.expires > now]
        if self.a_empty_until is not None and self.a_empty_until <= now:
            self.a_empty_until = None
        if self.aaaa_empty_until is not None and self.aaaa_empty_until <= now:
            self.aaaa_empty_until = None

    def is_empty(self) -> bool:
        return not (self.a_records or self.aaaa_records or self.a_empty_until or self.aaaa_empty_until)


class FamilyView(NamedTuple):
    known: bool
    # (address, remaining ttl in seconds)
    records: Tuple[Tuple[str, float], ...]


class CacheView(NamedTuple):
    v4: FamilyView
    v6: FamilyView

    def family(self, family: AddressFamily) -> FamilyView:
        return self.v4 if family is AddressFamily.V4 else self.v6

    @property
    def complete(self) -> bool:
        return self.v4.known and self.v6.known


_UNKNOWN = FamilyView(False, ())


class DnsCache:
    def __init__(self):
        self._entries: Dict[str, DnsCacheEntry] = {}
        self._lock = threading.Lock()

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def store(
        self, name: str, family: AddressFamily, records: Iterable[Tuple[str, float]], now: float
    ) -> None:
        """Replace the cached set of ``family`` for ``name`` with (address, ttl) pairs."""
        fresh = [CachedAddress(addr, now + ttl) for addr, ttl in records if ttl > 0]
        if not fresh:
            return
        with self._lock:
            entry = self._entries.setdefault(normalize_name(name), DnsCacheEntry(normalize_name(name)))
            if family is AddressFamily.V4:
                entry.a_records, entry.a_empty_until = fresh, None
            else:
                entry.aaaa_records, entry.aaaa_empty_until = fresh, None

    def store_negative(self, name: str, family: AddressFamily, ttl: float, now: float) -> None:
        if ttl <= 0:
            return
        with self._lock:
            entry = self._entries.setdefault(normalize_name(name), DnsCacheEntry(normalize_name(name)))
            if family is AddressFamily.V4:
                entry.a_records, entry.a_empty_until = [], now + ttl
            else:
                entry.aaaa_records, entry.aaaa_empty_until = [], now + ttl

    def lookup(self, name: str, now: float) -> CacheView:
        """Live view of ``name``; expired records are never included."""
        with self._lock:
            entry = self._entries.get(normalize_name(name))
            if entry is None:
                return CacheView(_UNKNOWN, _UNKNOWN)
            return CacheView(
                _view(entry.a_records, entry.a_empty_until, now),
                _view(entry.aaaa_records, entry.aaaa_empty_until, now),
            )

    def entry(self, name: str) -> Optional[DnsCacheEntry]:
        with self._lock:
            return self._entries.get(normalize_name(name))

    def expire(self, now: float) -> int:
        """Drop expired records and entries left empty; returns entries removed."""
        with self._lock:
            dead = []
            for key, entry in self._entries.items():
                entry._prune(now)
                if entry.is_empty():
                    dead.append(key)
            for key in dead:
                del self._entries[key]
            return len(dead)


def _view(records: List[CachedAddress], empty_until: Optional[float], now: float) -> FamilyView:
    live = tuple((r.address, r.expires - now) for r in records if r.expires > now)
    if live:
        return FamilyView(True, live)
    return FamilyView(empty_until is not None and empty_until > now, ())
