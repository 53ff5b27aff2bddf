"""Caching UDP DNS proxy that steers clients between IPv4 and IPv6.

Cache misses are relayed to the upstream resolver untouched. Once both the A
and AAAA sets of a name are cached, AAAA queries are answered with either the
native IPv6 addresses or the IPv4 addresses in IPv4-mapped form, as chosen by
the name's group bandit, and A queries get an empty NOERROR answer.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import random
import struct
import time
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Optional, Sequence, Tuple

from dnslib import AAAA, CLASS, QTYPE, RCODE, RR, A, DNSHeader, DNSRecord

from afsel.dnscache import NEGATIVE_TTL_DEFAULT, CacheView, DnsCache, FamilyView
from afsel.exp3 import AddressFamily
from afsel.feedback import FeedbackProtocol
from afsel.steering import SteeringRegistry, load_suffixes, map_v4_to_v6, normalize_name

logger = logging.getLogger(__name__)
steer_log = logging.getLogger("afsel.steer")

Address = Tuple[str, int]
Upstream = Callable[[bytes], Awaitable[bytes]]

_QTYPE_FAMILY = {QTYPE.A: AddressFamily.V4, QTYPE.AAAA: AddressFamily.V6}


class UpstreamError(Exception):
    pass


@dataclass
class ProxyConfig:
    listen: Address = ("127.0.0.1", 5353)
    upstream: Address = ("127.0.0.1", 53)
    gamma: float = 0.1
    steer: bool = True
    empty_a: bool = True
    feedback: Optional[Address] = ("127.0.0.1", 5354)
    suffix_file: Optional[str] = None
    upstream_timeout: float = 2.0
    seed: Optional[int] = None
    expire_interval: float = 30.0


class _Exchange(asyncio.DatagramProtocol):
    def __init__(self, query: bytes, done: asyncio.Future):
        self.query = query
        self.done = done

    def connection_made(self, transport):
        transport.sendto(self.query)

    def datagram_received(self, data, addr):
        # Ignore stray datagrams that do not answer this transaction.
        if not self.done.done() and data[:2] == self.query[:2]:
            self.done.set_result(data)

    def error_received(self, exc):
        if not self.done.done():
            self.done.set_exception(UpstreamError(str(exc)))


class UdpUpstream:
    """One ephemeral socket per exchange, so concurrent queries never collide."""

    def __init__(self, address: Address, timeout: float = 2.0):
        self.address = address
        self.timeout = timeout

    async def __call__(self, query: bytes) -> bytes:
        loop = asyncio.get_running_loop()
        done = loop.create_future()
        transport, _ = await loop.create_datagram_endpoint(
            lambda: _Exchange(query, done), remote_addr=self.address
        )
        try:
            return await asyncio.wait_for(done, self.timeout)
        except asyncio.TimeoutError:
            raise UpstreamError(f"no answer from {self.address} within {self.timeout}s") from None
        finally:
            transport.close()


def formerr(data: bytes) -> Optional[bytes]:
    """FORMERR echoing the transaction ID, or None when there is no header."""
    if len(data) < 12:
        return None
    qid, flags = struct.unpack_from("!HH", data)
    if flags & 0x8000:
        return None
    opcode = flags & 0x7800
    rd = flags & 0x0100
    return struct.pack("!HHHHHH", qid, 0x8000 | opcode | rd | RCODE.FORMERR, 0, 0, 0, 0)


@dataclass
class ProxyStats:
    queries: int = 0
    relayed: int = 0
    hits: int = 0
    steered_v4: int = 0
    steered_v6: int = 0
    empty_a: int = 0
    formerr: int = 0
    servfail: int = 0


class SteeringProxy:
    def __init__(
        self,
        config: Optional[ProxyConfig] = None,
        upstream: Optional[Upstream] = None,
        registry: Optional[SteeringRegistry] = None,
        cache: Optional[DnsCache] = None,
        rng: Optional[random.Random] = None,
        clock: Callable[[], float] = time.time,
    ):
        config = config or ProxyConfig()
        self.config = config
        self.upstream = upstream or UdpUpstream(config.upstream, config.upstream_timeout)
        if registry is None:
            suffixes = load_suffixes(config.suffix_file) if config.suffix_file else ()
            registry = SteeringRegistry(config.gamma, suffixes)
        self.registry = registry
        self.cache = cache if cache is not None else DnsCache()
        self.rng = rng or random.Random(config.seed)
        self.clock = clock
        self.stats = ProxyStats()

    async def handle_query(self, data: bytes, now: Optional[float] = None) -> Optional[bytes]:
        """Answer one client datagram; ``None`` means send nothing."""
        self.stats.queries += 1
        try:
            request = DNSRecord.parse(data)
        except Exception:
            self.stats.formerr += 1
            return formerr(data)
        if request.header.qr:
            return None
        if len(request.questions) != 1:
            self.stats.formerr += 1
            return formerr(data)

        question = request.q
        family = _QTYPE_FAMILY.get(question.qtype)
        if family is not None and question.qclass == CLASS.IN and request.header.opcode == 0:
            if now is None:
                now = self.clock()
            name = normalize_name(question.qname)
            if name:
                answer = self._from_cache(request, name, family, now)
                if answer is not None:
                    self.stats.hits += 1
                    return answer
        return await self._relay(request, data, family, now)

    def expire_and_refresh(self, now: Optional[float] = None) -> int:
        return self.cache.expire(self.clock() if now is None else now)

    def _from_cache(self, request, name: str, family: AddressFamily, now: float) -> Optional[bytes]:
        view = self.cache.lookup(name, now)
        if not self.config.steer:
            fam_view = view.family(family)
            if not fam_view.known:
                return None
            return self._reply(request, family, fam_view.records)
        if not view.complete:
            return None
        if family is AddressFamily.V4:
            if self.config.empty_a:
                self.stats.empty_a += 1
                return self._reply(request, AddressFamily.V4, ())
            return self._reply(request, AddressFamily.V4, view.v4.records)
        return self._steer_aaaa(request, name, view)

    def _steer_aaaa(self, request, name: str, view: CacheView) -> bytes:
        key = self.registry.key_for(name)
        if view.v4.records and view.v6.records:
            chosen, probs = self.registry.choose(key, self.rng.random())
        elif view.v4.records:
            chosen, probs = AddressFamily.V4, self.registry.probabilities(key)
        elif view.v6.records:
            chosen, probs = AddressFamily.V6, self.registry.probabilities(key)
        else:
            return self._reply(request, AddressFamily.V6, ())

        if chosen is AddressFamily.V4:
            self.stats.steered_v4 += 1
            records = [(str(map_v4_to_v6(addr)), ttl) for addr, ttl in view.v4.records]
        else:
            self.stats.steered_v6 += 1
            records = list(view.v6.records)
        steer_log.info(
            json.dumps(
                {
                    "ts": round(time.time(), 3),
                    "name": name,
                    "group": key,
                    "family": chosen.value,
                    "p_v4": probs[0],
                    "p_v6": probs[1],
                },
                sort_keys=True,
            )
        )
        return self._reply(request, AddressFamily.V6, records)

    def _reply(self, request, rtype_family: AddressFamily, records: Sequence[Tuple[str, float]]) -> bytes:
        header = DNSHeader(id=request.header.id, qr=1, aa=0, ra=1, rd=request.header.rd)
        reply = DNSRecord(header, q=request.q)
        rtype, rdata = (QTYPE.A, A) if rtype_family is AddressFamily.V4 else (QTYPE.AAAA, AAAA)
        for addr, remaining in records:
            ttl = max(1, math.floor(remaining))
            reply.add_answer(RR(request.q.qname, rtype, CLASS.IN, ttl, rdata(addr)))
        return reply.pack()

    async def _relay(self, request, data: bytes, family: Optional[AddressFamily], now) -> bytes:
        self.stats.relayed += 1
        try:
            response = await self.upstream(data)
        except (UpstreamError, OSError) as exc:
            logger.warning("upstream failure for %s: %s", request.q.qname, exc)
            self.stats.servfail += 1
            header = DNSHeader(id=request.header.id, qr=1, ra=1, rd=request.header.rd, rcode=RCODE.SERVFAIL)
            return DNSRecord(header, q=request.q).pack()
        if family is not None and request.q.qclass == CLASS.IN:
            self._learn(request, response, family, self.clock() if now is None else now)
        return response

    def _learn(self, request, response: bytes, family: AddressFamily, now: float) -> None:
        try:
            parsed = DNSRecord.parse(response)
        except Exception:
            return
        header = parsed.header
        if header.rcode != RCODE.NOERROR or header.tc or header.id != request.header.id:
            return
        if len(parsed.questions) != 1 or parsed.q.qtype != request.q.qtype:
            return
        name = normalize_name(request.q.qname)
        if normalize_name(parsed.q.qname) != name:
            return
        rtype = request.q.qtype
        records, chain_ttl, dangling = _follow_chain(parsed.rr, name, rtype)
        if records:
            self.cache.store(name, family, [(a, min(t, chain_ttl)) for a, t in records], now)
        elif not dangling:
            self.cache.store_negative(name, family, _negative_ttl(parsed), now)


def _follow_chain(answers, name: str, rtype: int):
    """Records of ``rtype`` reached from ``name`` through CNAMEs in the answer section.

    Returns (records, min CNAME ttl, dangling) where dangling means a CNAME
    points at a name whose records the answer does not include.
    """
    owners = {name}
    chain_ttl = math.inf
    changed = True
    while changed:
        changed = False
        for rr in answers:
            if rr.rtype == QTYPE.CNAME and normalize_name(rr.rname) in owners:
                target = normalize_name(rr.rdata.label)
                chain_ttl = min(chain_ttl, rr.ttl)
                if target not in owners:
                    owners.add(target)
                    changed = True
    records = [
        (str(rr.rdata), rr.ttl)
        for rr in answers
        if rr.rtype == rtype and normalize_name(rr.rname) in owners
    ]
    return records, chain_ttl, (not records and len(owners) > 1)


def _negative_ttl(response: DNSRecord) -> float:
    for rr in response.auth:
        if rr.rtype == QTYPE.SOA:
            return min(rr.ttl, rr.rdata.times[4])
    return NEGATIVE_TTL_DEFAULT


class _DnsProtocol(asyncio.DatagramProtocol):
    def __init__(self, proxy: SteeringProxy):
        self.proxy = proxy
        self.transport = None
        self._tasks = set()

    def connection_made(self, transport):
        self.transport = transport

    def datagram_received(self, data, addr):
        task = asyncio.ensure_future(self._answer(data, addr))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _answer(self, data, addr):
        try:
            response = await self.proxy.handle_query(data)
        except Exception:
            logger.exception("failed to handle query from %s", addr)
            response = formerr(data)
        if response is not None and self.transport is not None:
            self.transport.sendto(response, addr)


@dataclass
class ProxyServer:
    """Runs the DNS listener, the feedback listener and periodic cache expiry."""

    config: ProxyConfig
    proxy: Optional[SteeringProxy] = None
    dns_address: Optional[Address] = None
    feedback_address: Optional[Address] = None
    feedback_protocol: Optional[FeedbackProtocol] = None
    _transports: list = field(default_factory=list)
    _expiry: Optional[asyncio.Task] = None

    async def start(self) -> "ProxyServer":
        loop = asyncio.get_running_loop()
        if self.proxy is None:
            self.proxy = SteeringProxy(self.config)
        transport, _ = await loop.create_datagram_endpoint(
            lambda: _DnsProtocol(self.proxy), local_addr=self.config.listen
        )
        self._transports.append(transport)
        self.dns_address = transport.get_extra_info("sockname")[:2]
        if self.config.feedback is not None:
            self.feedback_protocol = FeedbackProtocol(self.proxy.registry)
            transport, _ = await loop.create_datagram_endpoint(
                lambda: self.feedback_protocol, local_addr=self.config.feedback
            )
            self._transports.append(transport)
            self.feedback_address = transport.get_extra_info("sockname")[:2]
        self._expiry = asyncio.ensure_future(self._expire_loop())
        logger.info("serving DNS on %s, feedback on %s", self.dns_address, self.feedback_address)
        return self

    async def _expire_loop(self):
        while True:
            await asyncio.sleep(self.config.expire_interval)
            self.proxy.expire_and_refresh()

    def close(self) -> None:
        if self._expiry is not None:
            self._expiry.cancel()
        for transport in self._transports:
            transport.close()
        self._transports.clear()

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Event().wait()
        finally:
            self.close()
