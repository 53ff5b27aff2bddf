"""Latency-driven IPv4/IPv6 selection: EXP3 bandit, steering DNS proxy, trace analysis."""

__version__ = "0.1.0"
