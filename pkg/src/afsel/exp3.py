"""Two-action EXP3 bandit choosing between IPv4 and IPv6.

The state is immutable: ``update`` returns a new :class:`Exp3State`. Randomness
is injected by the caller as a uniform sample in [0, 1), so the module holds no
RNG and every run is reproducible.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Tuple

N_ACTIONS = 2


class AddressFamily(enum.Enum):
    V4 = 4
    V6 = 6

    def other(self) -> "AddressFamily":
        return AddressFamily.V6 if self is AddressFamily.V4 else AddressFamily.V4

    @classmethod
    def parse(cls, value) -> "AddressFamily":
        """Accept 4/6, "4"/"6", "v4"/"v6" or an existing member."""
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().lstrip("v").removeprefix("ipv")
        try:
            return cls(int(text))
        except ValueError:
            raise ValueError(f"unknown address family: {value!r}") from None


@dataclass(frozen=True)
class Exp3State:
    gamma: float
    w_v4: float = 1.0
    w_v6: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma {self.gamma} is not in ]0, 1]")
        for w in (self.w_v4, self.w_v6):
            if not (w > 0.0 and math.isfinite(w)):
                raise ValueError(f"weights must be positive and finite, got {w}")

    @property
    def weights(self) -> Tuple[float, float]:
        return (self.w_v4, self.w_v6)

    def probabilities(self) -> Tuple[float, float]:
        """Return (P(V4), P(V6))."""
        floor = self.gamma / N_ACTIONS
        p4 = (1.0 - self.gamma) * self.w_v4 / (self.w_v4 + self.w_v6) + floor
        # Derive P(V6) from P(V4) so the pair sums to one exactly.
        return p4, 1.0 - p4

    def probability(self, family: AddressFamily) -> float:
        p4, p6 = self.probabilities()
        return p4 if family is AddressFamily.V4 else p6

    def choose(self, uniform_sample: float) -> AddressFamily:
        if uniform_sample < self.probabilities()[0]:
            return AddressFamily.V4
        return AddressFamily.V6

    def update(self, action: AddressFamily, gain: float) -> "Exp3State":
        if not 0.0 <= gain <= 1.0:
            raise ValueError(f"gain {gain} is not in [0, 1]")
        if gain == 0.0:
            return self
        estimated = gain / self.probability(action)
        factor = math.exp(self.gamma * estimated / N_ACTIONS)
        w4, w6 = self.w_v4, self.w_v6
        if action is AddressFamily.V4:
            w4 *= factor
        else:
            w6 *= factor
        # Only the weight ratio matters; rescaling keeps the weights bounded.
        top = max(w4, w6)
        w4, w6 = w4 / top, w6 / top
        # A ratio beyond float range would underflow the smaller weight to 0.
        w4 = max(w4, _MIN_WEIGHT)
        w6 = max(w6, _MIN_WEIGHT)
        return Exp3State(self.gamma, w4, w6)


_MIN_WEIGHT = 1e-300


def exp3_new(gamma: float) -> Exp3State:
    return Exp3State(gamma)


@dataclass(frozen=True)
class RewardContext:
    """Most recent latency observed for each family, in milliseconds."""

    last_v4: Optional[float] = None
    last_v6: Optional[float] = None

    def last(self, family: AddressFamily) -> Optional[float]:
        return self.last_v4 if family is AddressFamily.V4 else self.last_v6

    def record(self, family: AddressFamily, metric: float) -> "RewardContext":
        if family is AddressFamily.V4:
            return RewardContext(metric, self.last_v6)
        return RewardContext(self.last_v4, metric)


def compute_gain(
    chosen: AddressFamily, observed_metric: float, ctx: RewardContext
) -> Tuple[float, RewardContext]:
    """Full reward when ``chosen`` beat the last metric seen for the other family.

    A family with no history on the other side is rewarded, which keeps early
    exploration symmetric.
    """
    if not observed_metric > 0.0:
        raise ValueError(f"metric must be positive, got {observed_metric}")
    reference = ctx.last(chosen.other())
    gain = 1.0 if reference is None or observed_metric < reference else 0.0
    return gain, ctx.record(chosen, observed_metric)
