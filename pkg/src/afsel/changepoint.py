"""Binary segmentation for mean shifts under a squared-error cost."""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

# Normal-consistency constant for the median absolute deviation.
_MAD_SCALE = 1.4826


def noise_variance(signal: np.ndarray) -> float:
    """Robust noise variance from first differences, insensitive to mean shifts."""
    if len(signal) < 3:
        return float(np.var(signal))
    d = np.diff(signal)
    mad = float(np.median(np.abs(d - np.median(d))))
    return (_MAD_SCALE * mad) ** 2 / 2.0


def bic_penalty(n: int, variance: float, weight: float = 3.0) -> float:
    """Cost reduction a new change point must exceed.

    ``weight * variance * ln(n)``; the default of 3 is the leading term of the
    modified BIC for mean shifts (location, mean and segment-length charge).
    """
    return weight * variance * math.log(max(n, 2))


class _Cost:
    def __init__(self, signal: np.ndarray):
        self.s1 = np.concatenate(([0.0], np.cumsum(signal)))
        self.s2 = np.concatenate(([0.0], np.cumsum(signal * signal)))

    def sse(self, a: int, b: int) -> float:
        n = b - a
        total = self.s1[b] - self.s1[a]
        return max(float(self.s2[b] - self.s2[a] - total * total / n), 0.0)

    def best_split(self, a: int, b: int, min_len: int) -> Tuple[int, float]:
        ks = np.arange(a + min_len, b - min_len + 1)
        left_n = ks - a
        right_n = b - ks
        left = self.s1[ks] - self.s1[a]
        right = (self.s1[b] - self.s1[a]) - left
        # SSE(a,k) + SSE(k,b) = const - left^2/nl - right^2/nr
        gain = left * left / left_n + right * right / right_n
        i = int(np.argmax(gain))
        total = self.s1[b] - self.s1[a]
        reduction = float(gain[i] - total * total / (b - a))
        return int(ks[i]), reduction


def binary_segmentation(
    signal, min_len: int = 30, penalty: float | None = None
) -> List[Tuple[int, int]]:
    """Partition ``signal`` into contiguous half-open ranges of length >= min_len.

    A range is split at the point minimising the summed within-range squared
    error whenever that lowers the cost by more than ``penalty``. By default the
    penalty is the BIC charge computed from a robust noise estimate.
    """
    x = np.asarray(signal, dtype=float)
    n = len(x)
    if min_len < 1:
        raise ValueError("min_len must be at least 1")
    if n == 0:
        return []
    if n < 2 * min_len:
        return [(0, n)]
    # Centre for numerical stability of the cumulative sums.
    x = x - np.median(x)
    cost = _Cost(x)
    if penalty is None:
        penalty = bic_penalty(n, noise_variance(x))
    tolerance = 1e-9 * (cost.sse(0, n) + 1.0)

    segments = []
    stack = [(0, n)]
    while stack:
        a, b = stack.pop()
        if b - a < 2 * min_len:
            segments.append((a, b))
            continue
        k, reduction = cost.best_split(a, b, min_len)
        if reduction > penalty and reduction > tolerance:
            stack.append((k, b))
            stack.append((a, k))
        else:
            segments.append((a, b))
    segments.sort()
    return segments
