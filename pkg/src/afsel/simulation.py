"""Replay paired latency traces through EXP3 and fixed-choice baselines."""

from __future__ import annotations

import hashlib
import random
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from afsel.analysis import PairClassification, PairedSample, classify_pair, majority_family
from afsel.exp3 import AddressFamily, RewardContext, compute_gain, exp3_new

V4, V6 = AddressFamily.V4, AddressFamily.V6

METHODS = ("exp3", "aposteriori", "probe_best")
METRICS = ("best_choice_ratio", "expected_gain_abs_ms", "expected_gain_rel")


@dataclass(frozen=True)
class SimulationConfig:
    gamma: float = 0.1
    train_rounds: int = 60
    runs: int = 100
    base_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma {self.gamma} is not in ]0, 1]")
        if self.train_rounds < 0:
            raise ValueError("train_rounds must be >= 0")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


@dataclass(frozen=True)
class SimulationResult:
    best_choice_ratio: float
    expected_gain_abs_ms: float
    expected_gain_rel: float
    category: PairClassification
    method: str = "exp3"
    family: Optional[AddressFamily] = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["category"] = self.category.value
        d["family"] = None if self.family is None else self.family.value
        return d


def run_seed(base_seed: int, pair_key, run_index: int) -> int:
    """64-bit seed for one run, derived from the master seed."""
    text = f"{base_seed}/{pair_key}/{run_index}".encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "big")


def _check_trace(samples: Sequence[PairedSample], train_rounds: int) -> None:
    if len(samples) < train_rounds + 1:
        raise ValueError(
            f"trace has {len(samples)} rounds, need more than {train_rounds} training rounds"
        )


def _category(samples: Sequence[PairedSample], category) -> PairClassification:
    if category is not None:
        return PairClassification(category)
    if len(samples) < 30:
        return PairClassification.NONE_BETTER
    return classify_pair(samples)


def median_rct(samples: Sequence[PairedSample]) -> float:
    return statistics.median([s.rct_v4 for s in samples] + [s.rct_v6 for s in samples])


def _exp3_run(
    v4: Sequence[float], v6: Sequence[float], gamma: float, train_rounds: int, rng: random.Random
) -> Tuple[float, float]:
    state = exp3_new(gamma)
    ctx = RewardContext()
    best = 0
    gain_ms = 0.0
    for i in range(len(v4)):
        family = state.choose(rng.random())
        if family is V4:
            chosen, other = v4[i], v6[i]
        else:
            chosen, other = v6[i], v4[i]
        if i >= train_rounds and chosen < other:
            best += 1
            gain_ms += other - chosen
        gain, ctx = compute_gain(family, chosen, ctx)
        state = state.update(family, gain)
    evaluated = len(v4) - train_rounds
    return best / evaluated, gain_ms / evaluated


def run_simulation(
    samples: Sequence[PairedSample],
    cfg: SimulationConfig = SimulationConfig(),
    pair_key=None,
    category: Optional[PairClassification] = None,
) -> SimulationResult:
    """Median EXP3 score over ``cfg.runs`` seeded replays of one trace.

    A round counts as a best choice when the chosen family's RCT is strictly
    lower; its gain is the RCT saved over the other family. Only rounds after
    the training window are scored.
    """
    _check_trace(samples, cfg.train_rounds)
    v4 = [s.rct_v4 for s in samples]
    v6 = [s.rct_v6 for s in samples]
    scores, gains = [], []
    for run in range(cfg.runs):
        rng = random.Random(run_seed(cfg.base_seed, pair_key, run))
        score, gain = _exp3_run(v4, v6, cfg.gamma, cfg.train_rounds, rng)
        scores.append(score)
        gains.append(gain)
    gain_abs = statistics.median(gains)
    return SimulationResult(
        statistics.median(scores),
        gain_abs,
        gain_abs / median_rct(samples),
        _category(samples, category),
    )


def round_wins(samples: Iterable[PairedSample]) -> Tuple[int, int]:
    """Rounds won strictly by IPv4 and by IPv6."""
    w4 = w6 = 0
    for s in samples:
        if s.rct_v4 < s.rct_v6:
            w4 += 1
        elif s.rct_v6 < s.rct_v4:
            w6 += 1
    return w4, w6


def score_fixed(
    samples: Sequence[PairedSample],
    family: AddressFamily,
    train_rounds: int = 60,
    method: str = "fixed",
    category: Optional[PairClassification] = None,
) -> SimulationResult:
    """Score always choosing ``family`` over the evaluation rounds."""
    _check_trace(samples, train_rounds)
    other = family.other()
    evaluated = samples[train_rounds:]
    best = 0
    gain_ms = 0.0
    for s in evaluated:
        chosen, alt = s.rct(family), s.rct(other)
        if chosen < alt:
            best += 1
            gain_ms += alt - chosen
    gain_abs = gain_ms / len(evaluated)
    return SimulationResult(
        best / len(evaluated),
        gain_abs,
        gain_abs / median_rct(samples),
        _category(samples, category),
        method,
        family,
    )


def aposteriori_family(samples: Sequence[PairedSample]) -> AddressFamily:
    return majority_family(*round_wins(samples))


def baseline_aposteriori(
    samples: Sequence[PairedSample],
    train_rounds: int = 60,
    category: Optional[PairClassification] = None,
) -> SimulationResult:
    """Fixed choice of the family winning most rounds over the whole trace."""
    if not samples:
        raise ValueError("empty trace")
    return score_fixed(samples, aposteriori_family(samples), train_rounds, "aposteriori", category)


def baseline_probe_best(per_pair_winners: Mapping[object, Optional[AddressFamily]]) -> AddressFamily:
    """Family winning most of a probe's pairs; ``None`` entries are ties."""
    if not per_pair_winners:
        raise ValueError("at least one pair is required")
    v4 = sum(1 for f in per_pair_winners.values() if f is V4)
    v6 = sum(1 for f in per_pair_winners.values() if f is V6)
    return majority_family(v4, v6)


def pair_winner(samples: Sequence[PairedSample]) -> Optional[AddressFamily]:
    """Family winning most rounds of a pair, or ``None`` on a tie."""
    w4, w6 = round_wins(samples)
    if w4 == w6:
        return None
    return V4 if w4 > w6 else V6


def empirical_cdf(values: Iterable[float]) -> List[List[float]]:
    """Sorted ``[value, cumulative fraction]`` steps, one per distinct value."""
    ordered = sorted(values)
    n = len(ordered)
    steps: List[List[float]] = []
    for i, v in enumerate(ordered, start=1):
        if steps and steps[-1][0] == v:
            steps[-1][1] = i / n
        else:
            steps.append([v, i / n])
    return steps


def aggregate_cdf(results: Iterable[SimulationResult]) -> Dict[str, Dict[str, Dict[str, List[List[float]]]]]:
    """CDF tables keyed by category, then method, then metric."""
    grouped: Dict[Tuple[str, str], List[SimulationResult]] = defaultdict(list)
    for r in results:
        grouped[(PairClassification(r.category).value, r.method)].append(r)
    if not grouped:
        raise ValueError("at least one result is required")
    tables: Dict[str, Dict[str, Dict[str, List[List[float]]]]] = {}
    for (category, method) in sorted(grouped):
        rs = grouped[(category, method)]
        tables.setdefault(category, {})[method] = {
            metric: empirical_cdf(getattr(r, metric) for r in rs) for metric in METRICS
        }
    return tables
