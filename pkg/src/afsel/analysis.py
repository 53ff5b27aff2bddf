"""Paired IPv4/IPv6 latency analysis.

Input is one test per line, ``probe_id,anchor_id,timestamp,family,rct_ms``.
Tests of the same (probe, anchor) are paired across families, filtered, and
classified with a Welch t-test plus an overlap check.
"""

from __future__ import annotations

import bisect
import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from afsel.changepoint import binary_segmentation
from afsel.exp3 import AddressFamily

PAIR_WINDOW_S = 120.0
MIN_PAIR_SAMPLES = 300
MIN_SEGMENT_SAMPLES = 30
SIGNIFICANCE = 0.02
CONFIDENCE = 0.98

PairKey = Tuple[int, int]


class ParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class RawTest(NamedTuple):
    probe_id: int
    anchor_id: int
    timestamp: float
    family: AddressFamily
    rct: float


class PairedSample(NamedTuple):
    timestamp: float
    rct_v4: float
    rct_v6: float

    def rct(self, family: AddressFamily) -> float:
        return self.rct_v4 if family is AddressFamily.V4 else self.rct_v6


class PairClassification(str, enum.Enum):
    V4_BETTER = "V4Better"
    V6_BETTER = "V6Better"
    NONE_BETTER = "NoneBetter"

    @property
    def family(self) -> Optional[AddressFamily]:
        return _CLASS_FAMILY.get(self)

    @classmethod
    def better(cls, family: AddressFamily) -> "PairClassification":
        return cls.V4_BETTER if family is AddressFamily.V4 else cls.V6_BETTER


_CLASS_FAMILY = {
    PairClassification.V4_BETTER: AddressFamily.V4,
    PairClassification.V6_BETTER: AddressFamily.V6,
}


class SegmentGroup(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"


def parse_tests(lines: Iterable[str]) -> List[RawTest]:
    """Parse the delimiter-separated test format.

    Blank lines, ``#`` comments and a leading ``probe_id`` header are skipped.
    Any other malformed line raises :class:`ParseError` with its line number.
    """
    tests = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if lineno == 1 and line.lower().startswith("probe_id"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 5:
            raise ParseError(lineno, f"expected 5 fields, got {len(fields)}")
        try:
            probe, anchor = int(fields[0]), int(fields[1])
            timestamp = float(fields[2])
            family = AddressFamily.parse(fields[3])
            rct = float(fields[4])
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if not (rct > 0 and math.isfinite(rct)) or not math.isfinite(timestamp):
            raise ParseError(lineno, f"invalid measurement {fields[2]!r}/{fields[4]!r}")
        tests.append(RawTest(probe, anchor, timestamp, family, rct))
    return tests


def read_tests(path) -> List[RawTest]:
    with open(path, encoding="utf-8") as f:
        return parse_tests(f)


def pair_tests(
    tests: Iterable[RawTest], window_s: float = PAIR_WINDOW_S
) -> Dict[PairKey, List[PairedSample]]:
    """Match IPv4 and IPv6 tests of each (probe, anchor) by nearest timestamp.

    Candidate pairs within ``window_s`` are accepted greedily by increasing time
    gap, so every test is used at most once.
    """
    by_pair: Dict[PairKey, Tuple[list, list]] = defaultdict(lambda: ([], []))
    for t in tests:
        v4s, v6s = by_pair[(t.probe_id, t.anchor_id)]
        (v4s if t.family is AddressFamily.V4 else v6s).append(t)

    paired = {}
    for key in sorted(by_pair):
        v4s, v6s = by_pair[key]
        v4s.sort(key=lambda t: (t.timestamp, t.rct))
        v6s.sort(key=lambda t: (t.timestamp, t.rct))
        v6_times = [t.timestamp for t in v6s]
        candidates = []
        for i, a in enumerate(v4s):
            j = bisect.bisect_left(v6_times, a.timestamp - window_s)
            while j < len(v6s) and v6_times[j] <= a.timestamp + window_s:
                candidates.append((abs(v6_times[j] - a.timestamp), i, j))
                j += 1
        candidates.sort()
        used4, used6 = set(), set()
        samples = []
        for _, i, j in candidates:
            if i in used4 or j in used6:
                continue
            used4.add(i)
            used6.add(j)
            a, b = v4s[i], v6s[j]
            samples.append(PairedSample(min(a.timestamp, b.timestamp), a.rct, b.rct))
        if samples:
            samples.sort()
            paired[key] = samples
    return paired


def percentile_filter(
    samples: Sequence[PairedSample], lo: float = 5.0, hi: float = 95.0
) -> List[PairedSample]:
    """Drop samples where either family's RCT lies outside its [lo, hi] percentiles."""
    if not samples:
        return []
    v4 = np.array([s.rct_v4 for s in samples])
    v6 = np.array([s.rct_v6 for s in samples])
    lo4, hi4 = np.percentile(v4, [lo, hi])
    lo6, hi6 = np.percentile(v6, [lo, hi])
    keep = (v4 >= lo4) & (v4 <= hi4) & (v6 >= lo6) & (v6 <= hi6)
    return [s for s, k in zip(samples, keep) if k]


def ratio_series(samples: Iterable[PairedSample]) -> List[float]:
    return [s.rct_v4 / s.rct_v6 for s in samples]


@dataclass(frozen=True)
class WelchResult:
    mean_v4: float
    mean_v6: float
    std_v4: float
    std_v6: float
    t_statistic: float
    df: float
    p_value: float
    # Confidence interval on mean_v4 - mean_v6.
    ci_low: float
    ci_high: float


def welch_test(v4: Sequence[float], v6: Sequence[float], confidence: float = CONFIDENCE) -> WelchResult:
    """Two-sided Welch t-test with a confidence interval on the mean difference."""
    a = np.asarray(v4, dtype=float)
    b = np.asarray(v6, dtype=float)
    n1, n2 = len(a), len(b)
    m1, m2 = float(a.mean()), float(b.mean())
    var1, var2 = float(a.var(ddof=1)), float(b.var(ddof=1))
    q1, q2 = var1 / n1, var2 / n2
    se = math.sqrt(q1 + q2)
    diff = m1 - m2
    if se == 0.0:
        # Both samples are constant: the difference is known exactly.
        if diff == 0.0:
            return WelchResult(m1, m2, 0.0, 0.0, math.nan, math.nan, 1.0, 0.0, 0.0)
        t = math.copysign(math.inf, diff)
        return WelchResult(m1, m2, 0.0, 0.0, t, math.inf, 0.0, diff, diff)
    df = (q1 + q2) ** 2 / (q1**2 / (n1 - 1) + q2**2 / (n2 - 1))
    t = diff / se
    p = 2.0 * float(stats.t.sf(abs(t), df))
    half = float(stats.t.ppf(0.5 + confidence / 2.0, df)) * se
    return WelchResult(m1, m2, math.sqrt(var1), math.sqrt(var2), t, df, p, diff - half, diff + half)


def classify_pair(
    samples: Sequence[PairedSample],
    min_samples: int = MIN_SEGMENT_SAMPLES,
    alpha: float = SIGNIFICANCE,
) -> PairClassification:
    """Classify which family has the significantly lower RCT, if any.

    The lower-mean family is better when the t-test is significant and the
    confidence bound nearest zero exceeds the higher-mean sample's standard
    deviation, which rules out strongly overlapping distributions.
    """
    if len(samples) < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {len(samples)}")
    res = welch_test([s.rct_v4 for s in samples], [s.rct_v6 for s in samples], 1.0 - alpha)
    if not res.p_value < alpha:
        return PairClassification.NONE_BETTER
    if res.mean_v4 < res.mean_v6:
        bound, std_higher = -res.ci_high, res.std_v6
        winner = PairClassification.V4_BETTER
    else:
        bound, std_higher = res.ci_low, res.std_v4
        winner = PairClassification.V6_BETTER
    return winner if bound > std_higher else PairClassification.NONE_BETTER


def detect_segments(
    samples: Sequence[PairedSample], min_len: int = MIN_SEGMENT_SAMPLES
) -> List[Tuple[int, int]]:
    """Split the v4 - v6 difference signal into half-open index ranges."""
    diff = np.array([s.rct_v4 - s.rct_v6 for s in samples], dtype=float)
    return binary_segmentation(diff, min_len)


def classify_groups(
    global_class: PairClassification, segment_classes: Sequence[PairClassification]
) -> SegmentGroup:
    if not segment_classes:
        raise ValueError("at least one segment classification is required")
    family = global_class.family
    if family is not None:
        if PairClassification.better(family.other()) in segment_classes:
            return SegmentGroup.A
        if PairClassification.NONE_BETTER in segment_classes:
            return SegmentGroup.B
        return SegmentGroup.D
    if any(c is not PairClassification.NONE_BETTER for c in segment_classes):
        return SegmentGroup.C
    return SegmentGroup.D


class ProbeRatio(NamedTuple):
    best_family: AddressFamily
    ratio_best: float
    ratio_none: float


def majority_family(v4_count: int, v6_count: int) -> AddressFamily:
    """Family with more wins; IPv6 takes ties."""
    return AddressFamily.V4 if v4_count > v6_count else AddressFamily.V6


def probe_best_ratio(
    classifications: Mapping[PairKey, PairClassification]
) -> Dict[int, ProbeRatio]:
    per_probe: Dict[int, Counter] = defaultdict(Counter)
    for (probe, _anchor), cls in classifications.items():
        per_probe[probe][PairClassification(cls)] += 1
    out = {}
    for probe in sorted(per_probe):
        counts = per_probe[probe]
        total = sum(counts.values())
        best = majority_family(counts[PairClassification.V4_BETTER], counts[PairClassification.V6_BETTER])
        out[probe] = ProbeRatio(
            best,
            counts[PairClassification.better(best)] / total,
            counts[PairClassification.NONE_BETTER] / total,
        )
    return out


class Connection(NamedTuple):
    destination: str
    mode: str
    handshake_ms: float


EXPERIMENT_MODES = ("v4", "v6", "adaptive")


def experiment_report(
    connections: Iterable[Connection], min_tests: int = 100, warmup: int = 60
) -> Dict[str, Dict[str, float]]:
    """Mean handshake time per destination and mode, after the training warmup.

    Connections are taken in input order. The first ``warmup`` of each
    (destination, mode) are dropped and the rest are kept only when at least
    ``min_tests`` remain.
    """
    series: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    for destination, mode, handshake in connections:
        series[(destination, mode)].append(float(handshake))
    report: Dict[str, Dict[str, float]] = {}
    for (destination, mode) in sorted(series):
        kept = series[(destination, mode)][warmup:]
        if len(kept) < min_tests:
            continue
        report.setdefault(destination, {})[mode] = math.fsum(kept) / len(kept)
    return report


@dataclass
class PairAnalysis:
    key: PairKey
    n_paired: int
    n_filtered: int
    classification: PairClassification
    segments: List[Tuple[int, int]]
    segment_classes: List[PairClassification]
    group: SegmentGroup


def analyse_pair(
    key: PairKey, samples: Sequence[PairedSample], filtered: Sequence[PairedSample]
) -> PairAnalysis:
    global_class = classify_pair(filtered)
    segments = detect_segments(filtered)
    seg_classes = [classify_pair(filtered[a:b]) for a, b in segments]
    return PairAnalysis(
        key,
        len(samples),
        len(filtered),
        global_class,
        segments,
        seg_classes,
        classify_groups(global_class, seg_classes),
    )
