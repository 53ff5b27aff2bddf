"""Exit criteria. Each test records one PASS/FAIL line, shown in the summary.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import asyncio
import contextlib
import ipaddress
import json
import random
import statistics
import time

import numpy as np
import pytest
from dnslib import QTYPE, RCODE, DNSRecord
from scipy import stats

from afsel.analysis import PairClassification as PC
from afsel.analysis import PairedSample, classify_pair, detect_segments
from afsel.cli import main
from afsel.exp3 import AddressFamily, exp3_new
from afsel.feedback import FeedbackMessage, FeedbackProtocol, decode, encode
from afsel.proxy import ProxyConfig, ProxyServer
from afsel.simulation import SimulationConfig, baseline_aposteriori, run_simulation
from afsel.steering import SteeringRegistry, map_v4_to_v6

from conftest import ACCEPTANCE_LINES, make_trace
from dnsstub import Zone, start_zone_server, udp_query

V4, V6 = AddressFamily.V4, AddressFamily.V6


@contextlib.contextmanager
def criterion(number, title, budget_s):
    start = time.perf_counter()
    status = "FAIL"
    detail = {}
    try:
        yield detail
        elapsed = time.perf_counter() - start
        detail["runtime_s"] = round(elapsed, 3)
        assert elapsed < budget_s, f"took {elapsed:.2f}s, budget {budget_s}s"
        status = "PASS"
    finally:
        info = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"[{status}] {number:>2}. {title} ({info})"
        ACCEPTANCE_LINES.append(line)
        print(line)


def test_01_exp3_calibration():
    with criterion(1, "EXP3 reaches P(best) >= 0.90 in 60 rounds", 1.0) as d:
        finals = []
        for run in range(100):
            rng = random.Random(run)
            state = exp3_new(0.1)
            for _ in range(60):
                family = state.choose(rng.random())
                state = state.update(family, 1.0 if family is V4 else 0.0)
            finals.append(state.probability(V4))
        d["median_p_best"] = round(statistics.median(finals), 4)
        assert statistics.median(finals) >= 0.90


def test_02_exploration_floor():
    with criterion(2, "probability floor gamma/2 over 10,000 sequences", 5.0) as d:
        rng = random.Random(2)
        worst = 1.0
        for _ in range(10_000):
            gamma = rng.uniform(0.001, 1.0)
            state = exp3_new(gamma)
            for _ in range(rng.randint(1, 40)):
                family = V4 if rng.random() < 0.5 else V6
                gain = rng.choice((0.0, 1.0, rng.random()))
                state = state.update(family, gain)
                margin = min(state.probabilities()) - gamma / 2
                worst = min(worst, margin)
                assert margin >= -1e-9
        d["min_margin"] = f"{worst:.3g}"


def test_03_pure_exploration():
    with criterion(3, "gamma=1 chooses IPv4 half the time", 1.0) as d:
        rng = random.Random(3)
        state = exp3_new(1.0)
        v4 = 0
        for _ in range(10_000):
            family = state.choose(rng.random())
            v4 += family is V4
            state = state.update(family, 1.0 if family is V6 else 0.0)
        d["p_v4"] = v4 / 10_000
        assert 0.48 <= v4 / 10_000 <= 0.52


def test_04_simulation_convergence():
    with criterion(4, "simulation converges, a-posteriori bound within 0.10", 10.0) as d:
        rng = np.random.default_rng(4)
        trace = make_trace(rng.normal(80, 5, 300), rng.normal(100, 5, 300))
        exp3 = run_simulation(trace, SimulationConfig(gamma=0.1, runs=100, base_seed=4))
        post = baseline_aposteriori(trace)
        d["exp3"] = round(exp3.best_choice_ratio, 4)
        d["aposteriori"] = round(post.best_choice_ratio, 4)
        assert exp3.best_choice_ratio >= 0.85
        assert post.best_choice_ratio >= exp3.best_choice_ratio - 0.10


def _reference(v4, v6, alpha=0.02):
    res = stats.ttest_ind(v4, v6, equal_var=False)
    ci = res.confidence_interval(1 - alpha)
    if not res.pvalue < alpha:
        return PC.NONE_BETTER
    if np.mean(v4) < np.mean(v6):
        return PC.V4_BETTER if -ci.high > np.std(v6, ddof=1) else PC.NONE_BETTER
    return PC.V6_BETTER if ci.low > np.std(v4, ddof=1) else PC.NONE_BETTER


def _classify(v4, v6):
    ours = classify_pair(make_trace(v4, v6))
    assert ours is _reference(v4, v6)
    return ours


def test_05_classification():
    with criterion(5, "classification oracle (separated, identical, overlapping)", 10.0) as d:
        rng = np.random.default_rng(5)
        d["a"] = _classify(rng.normal(100, 1, 300), rng.normal(120, 1, 300)).value
        assert d["a"] == "V4Better"
        none = 0
        for seed in range(100):
            r = np.random.default_rng(500 + seed)
            none += _classify(r.normal(100, 10, 300), r.normal(100, 10, 300)) is PC.NONE_BETTER
        d["b_none"] = f"{none}/100"
        assert none >= 98
        d["c"] = _classify(rng.normal(100, 40, 300), rng.normal(105, 40, 300)).value
        assert d["c"] == "NoneBetter"


def test_06_change_point():
    with criterion(6, "step change point found on 200 inputs", 5.0) as d:
        boundaries = []
        for seed in range(200):
            rng = np.random.default_rng(600 + seed)
            v6 = rng.uniform(50, 150) + np.zeros(300)
            diff = np.r_[np.full(150, -20.0), np.full(150, 20.0)] + rng.normal(0, 2, 300)
            samples = make_trace(v6 + diff, v6)
            segments = detect_segments(samples)
            assert len(segments) == 2, segments
            assert all(b - a >= 30 for a, b in segments)
            boundaries.append(segments[0][1])
            assert abs(segments[0][1] - 150) <= 5
        d["boundary_range"] = f"[{min(boundaries)}, {max(boundaries)}]"


async def _proxy_scenario(d):
    zone = Zone(ttl=60)
    zone.add("example.com", "A", "192.0.2.1", "192.0.2.2")
    zone.add("example.com", "AAAA", "2001:db8::1")
    zone.add("www.example.com", "A", "192.0.2.10")
    zone.add("www.example.com", "AAAA", "2001:db8::10")
    upstream, upstream_addr = await start_zone_server(zone)
    config = ProxyConfig(listen=("127.0.0.1", 0), upstream=upstream_addr, feedback=("127.0.0.1", 0), seed=7)
    clock = {"now": 10_000.0}
    server = ProxyServer(config)
    await server.start()
    server.proxy.clock = lambda: clock["now"]
    try:
        # (a) cache miss relayed content-identical, then cached.
        q = DNSRecord.question("www.example.com", "AAAA")
        raw = await udp_query(server.dns_address, q.pack())
        assert raw == zone.answer(q.pack())
        relayed = DNSRecord.parse(raw)
        assert relayed.header.id == q.header.id
        assert server.proxy.cache.lookup("www.example.com", clock["now"]).v6.known
        d["a"] = "ok"

        # (b) 70 feedback datagrams favouring IPv4 steer the group to IPv4.
        loop = asyncio.get_running_loop()
        fb, _ = await loop.create_datagram_endpoint(asyncio.DatagramProtocol, remote_addr=server.feedback_address)
        fb.sendto(encode(FeedbackMessage.handshake("example.com", 6, 80)))
        for i in range(70):
            fb.sendto(encode(FeedbackMessage.handshake("example.com" if i % 2 else "cdn.example.com", 4, 20)))
        for _ in range(200):
            if server.feedback_protocol.received >= 71:
                break
            await asyncio.sleep(0.01)
        fb.close()
        assert server.feedback_protocol.applied == 71
        d["p_v4"] = round(server.proxy.registry.probabilities("example.com")[0], 4)

        await udp_query(server.dns_address, DNSRecord.question("example.com", "A").pack())
        await udp_query(server.dns_address, DNSRecord.question("example.com", "AAAA").pack())
        mapped = 0
        for _ in range(100):
            reply = DNSRecord.parse(
                await udp_query(server.dns_address, DNSRecord.question("example.com", "AAAA").pack())
            )
            assert all(rr.rtype == QTYPE.AAAA for rr in reply.rr)
            addrs = [ipaddress.IPv6Address(str(rr.rdata)) for rr in reply.rr]
            if addrs and all(a.ipv4_mapped is not None for a in addrs):
                assert sorted(str(a.ipv4_mapped) for a in addrs) == ["192.0.2.1", "192.0.2.2"]
                mapped += 1
            else:
                assert [str(a) for a in addrs] == ["2001:db8::1"]
        d["b_mapped"] = f"{mapped}/100"
        assert mapped >= 90

        # (c) cached A: NOERROR, no answers.
        reply = DNSRecord.parse(await udp_query(server.dns_address, DNSRecord.question("example.com", "A").pack()))
        assert reply.header.rcode == RCODE.NOERROR and reply.rr == []
        d["c"] = "ok"

        # (d) after the TTL the upstream is asked again.
        zone.records[("example.com", "A")] = [("192.0.2.99", 60)]
        zone.records[("example.com", "AAAA")] = [("2001:db8::99", 60)]
        clock["now"] += 61
        reply = DNSRecord.parse(await udp_query(server.dns_address, DNSRecord.question("example.com", "AAAA").pack()))
        assert [str(rr.rdata) for rr in reply.rr] == ["2001:db8::99"]
        assert server.proxy.cache.lookup("example.com", clock["now"]).v6.records[0][0] == "2001:db8::99"
        d["d"] = "ok"
    finally:
        server.close()
        upstream.close()


def test_07_proxy_integration():
    with criterion(7, "proxy relays, steers, empties A, never serves expired", 30.0) as d:
        asyncio.run(_proxy_scenario(d))


def test_08_ipv4_mapped_encoding():
    with criterion(8, "IPv4-mapped encoding of 1,000 addresses", 1.0) as d:
        rng = random.Random(8)
        for _ in range(1000):
            v4 = ipaddress.IPv4Address(rng.getrandbits(32))
            mapped = map_v4_to_v6(v4)
            assert mapped.packed == bytes(10) + b"\xff\xff" + v4.packed
            assert ipaddress.IPv6Address(str(mapped)).ipv4_mapped == v4
        d["checked"] = 1000


def test_09_feedback_wire_format():
    with criterion(9, "feedback round-trip and header mutations rejected", 5.0) as d:
        rng = random.Random(9)
        alphabet = "abcdefghijklmnopqrstuvwxyz0123456789-.é"
        messages = []
        for _ in range(10_000):
            name = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 80)))
            msg = FeedbackMessage(rng.choice((4, 6)), rng.getrandbits(32), name, rng.randint(0, 255))
            assert decode(encode(msg)) == msg
            messages.append(msg)
        registry = SteeringRegistry(0.1)
        proto = FeedbackProtocol(registry)
        mutations = 0
        for msg in messages[:100]:
            data = encode(FeedbackMessage(msg.family, msg.metric_value_us or 1, msg.name))
            for pos in (0, 1, 2, 5):
                for value in range(256):
                    if value == data[pos]:
                        continue
                    proto.datagram_received(data[:pos] + bytes([value]) + data[pos + 1:], None)
                    mutations += 1
        assert proto.applied == 0 and registry.keys() == []
        assert sum(proto.dropped.values()) == mutations
        d["round_trips"] = len(messages)
        d["mutations_rejected"] = mutations


def _write_pairs(path, n_pairs, rounds, seed):
    rng = np.random.default_rng(seed)
    lines = []
    for p in range(n_pairs):
        m6 = rng.uniform(60, 140)
        for i in range(rounds):
            ts = 1_700_000_000 + i * 1800
            lines.append(f"{p // 10},{p},{ts},4,{abs(rng.normal(100, 10)) + 0.1:.3f}")
            lines.append(f"{p // 10},{p},{ts + 7},6,{abs(rng.normal(m6, 10)) + 0.1:.3f}")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_10_simulate_determinism(tmp_path):
    with criterion(10, "simulate output byte-identical across runs", 10.0) as d:
        data = _write_pairs(tmp_path / "in.csv", 6, 300, seed=10)
        outputs = []
        for name in ("one.json", "two.json"):
            out = tmp_path / name
            assert main(["simulate", "--input", str(data), "--output", str(out), "--runs", "20", "--seed", "10"]) == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]
        d["bytes"] = len(outputs[0])


@pytest.mark.slow
def test_11_scale_smoke(tmp_path):
    with criterion(11, "400 pairs x 300 rounds x 100 runs", 300.0) as d:
        data = _write_pairs(tmp_path / "scale.csv", 400, 300, seed=11)
        out = tmp_path / "scale.json"
        assert main(["simulate", "--input", str(data), "--output", str(out), "--runs", "100", "--no-filter"]) == 0
        doc = json.loads(out.read_text())
        simulated = [r for r in doc["pairs"] if "exp3" in r]
        assert len(simulated) == 400
        d["pairs"] = len(simulated)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
