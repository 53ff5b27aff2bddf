"""Command-line entry point: ``afsel {proxy,simulate,classify,report,sendfeedback}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every option of the
``proxy`` and ``sendfeedback`` commands can also be set through an ``AFSEL_*``
environment variable (e.g. ``AFSEL_UPSTREAM=9.9.9.9:53``); flags win.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import os
import sys
import time
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from afsel import __version__
from afsel.analysis import (
    MIN_PAIR_SAMPLES,
    Connection,
    PairClassification,
    ParseError,
    SegmentGroup,
    analyse_pair,
    experiment_report,
    pair_tests,
    percentile_filter,
    probe_best_ratio,
    ratio_series,
    read_tests,
)
from afsel.feedback import FeedbackError, FeedbackMessage, send_feedback
from afsel.simulation import (
    SimulationConfig,
    aggregate_cdf,
    baseline_aposteriori,
    baseline_probe_best,
    pair_winner,
    run_simulation,
    score_fixed,
)

ENV_PREFIX = "AFSEL_"
logger = logging.getLogger("afsel")


class UsageError(Exception):
    pass


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _env_flag(name: str, default: bool) -> bool:
    value = _env(name)
    if value is None:
        return default
    text = value.strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"{ENV_PREFIX}{name}: expected a boolean, got {value!r}")


def gamma_type(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid gamma {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"gamma must be in ]0, 1], got {value}")
    return value


def address_type(text: str):
    """``host:port``, ``[v6]:port`` or a bare ``port`` (bound to localhost)."""
    text = text.strip()
    if text.isdigit():
        return ("127.0.0.1", _port(text))
    if text.startswith("["):
        host, sep, port = text[1:].partition("]:")
        if not sep:
            raise argparse.ArgumentTypeError(f"invalid address {text!r}")
        return (host, _port(port))
    host, sep, port = text.rpartition(":")
    if not sep or not host or ":" in host:
        raise argparse.ArgumentTypeError(f"invalid address {text!r}, expected host:port")
    return (host, _port(port))


def _port(text: str) -> int:
    try:
        port = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid port {text!r}") from None
    if not 0 <= port <= 65535:
        raise argparse.ArgumentTypeError(f"port out of range: {port}")
    return port


def _env_default(name: str, convert, fallback):
    # Bad environment values are usage errors, like bad flags.
    value = _env(name)
    if value is None:
        return fallback
    try:
        return convert(value)
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise UsageError(f"{ENV_PREFIX}{name}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afsel", description="Adaptive IPv4/IPv6 selection: steering proxy and trace tooling.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("proxy", help="run the steering DNS proxy")
    p.add_argument("--listen", type=address_type, default=_env_default("LISTEN", address_type, ("127.0.0.1", 5353)))
    p.add_argument("--upstream", type=address_type, default=_env_default("UPSTREAM", address_type, ("127.0.0.1", 53)))
    p.add_argument("--gamma", type=gamma_type, default=_env_default("GAMMA", gamma_type, 0.1))
    p.add_argument("--no-steer", dest="steer", action="store_false", default=_env_flag("STEER", True),
                   help="act as a plain caching forwarder")
    p.add_argument("--no-empty-a", dest="empty_a", action="store_false", default=_env_flag("EMPTY_A", True),
                   help="serve cached A records instead of empty A answers")
    p.add_argument("--feedback", type=address_type, default=_env_default("FEEDBACK", address_type, ("127.0.0.1", 5354)),
                   help="UDP address for transport feedback")
    p.add_argument("--no-feedback", action="store_true", help="do not open the feedback listener")
    p.add_argument("--suffix-file", default=_env("SUFFIX_FILE"), help="public-suffix list for grouping")
    p.add_argument("--timeout", type=float, default=_env_default("TIMEOUT", float, 2.0), help="upstream timeout (s)")
    p.add_argument("--seed", type=int, default=_env_default("SEED", int, None))

    p = sub.add_parser("simulate", help="replay paired traces through EXP3 and baselines")
    _add_io(p)
    p.add_argument("--gamma", type=gamma_type, default=0.1)
    p.add_argument("--runs", type=_positive_int, default=100)
    p.add_argument("--train", type=_non_negative_int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-samples", type=_non_negative_int, default=0,
                   help="skip pairs with fewer paired samples")

    p = sub.add_parser("classify", help="classify pairs and segment groups")
    _add_io(p)
    p.add_argument("--min-samples", type=_non_negative_int, default=MIN_PAIR_SAMPLES)

    p = sub.add_parser("report", help="mean handshake time per destination and mode")
    p.add_argument("--input", required=True, help="CSV of destination,mode,handshake_ms")
    p.add_argument("--output", required=True)
    p.add_argument("--min-tests", type=_non_negative_int, default=100)
    p.add_argument("--warmup", type=_non_negative_int, default=60)

    p = sub.add_parser("sendfeedback", help="send one feedback datagram")
    p.add_argument("--target", type=address_type, default=_env_default("FEEDBACK", address_type, ("127.0.0.1", 5354)))
    p.add_argument("--name", required=True)
    p.add_argument("--family", type=int, choices=(4, 6), required=True)
    p.add_argument("--ms", type=float, required=True, help="handshake time in milliseconds")
    return parser


def _add_io(p):
    p.add_argument("--input", required=True, help="test file: probe_id,anchor_id,timestamp,family,rct_ms")
    p.add_argument("--output", required=True, help="JSON output path")
    p.add_argument("--window", type=float, default=120.0, help="pairing window in seconds")
    p.add_argument("--no-filter", dest="filter", action="store_false",
                   help="skip the 5th-95th percentile filter")


def _positive_int(text):
    value = _non_negative_int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _non_negative_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return value


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def write_manifest(args, started: float, inputs: List[str], outputs: List[str], seed=None) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")}
    doc = {
        "subcommand": args.command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "base_seed": seed,
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "version": __version__,
    }
    for output in outputs:
        write_json(manifest_path(output), doc)


def _pairs(args):
    paired = pair_tests(read_tests(args.input), args.window)
    if args.filter:
        return {key: (samples, percentile_filter(samples)) for key, samples in paired.items()}
    return {key: (samples, samples) for key, samples in paired.items()}


def _key_json(key):
    return {"probe": key[0], "anchor": key[1]}


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = SimulationConfig(args.gamma, args.train, args.runs, args.seed)
    records = []
    simulated: Dict[tuple, list] = {}
    results = []
    for key, (_raw, samples) in _pairs(args).items():
        record = {**_key_json(key), "n": len(samples)}
        records.append(record)
        if len(samples) < args.min_samples:
            record["error"] = f"only {len(samples)} samples, need {args.min_samples}"
            continue
        try:
            exp3 = run_simulation(samples, cfg, pair_key=key)
        except ValueError as exc:
            record["error"] = str(exc)
            continue
        post = baseline_aposteriori(samples, cfg.train_rounds, exp3.category)
        record.update(category=exp3.category.value, exp3=exp3.to_json(), aposteriori=post.to_json())
        results += [exp3, post]
        simulated[key] = samples

    per_probe = defaultdict(dict)
    for key, samples in simulated.items():
        per_probe[key[0]][key[1]] = pair_winner(samples)
    probe_family = {probe: baseline_probe_best(w) for probe, w in per_probe.items()}
    for record in records:
        key = (record["probe"], record["anchor"])
        if key not in simulated:
            continue
        fixed = score_fixed(
            simulated[key], probe_family[key[0]], cfg.train_rounds, "probe_best",
            PairClassification(record["category"]),
        )
        record["probe_best"] = fixed.to_json()
        results.append(fixed)

    doc = {
        "config": {"gamma": cfg.gamma, "train_rounds": cfg.train_rounds, "runs": cfg.runs,
                   "base_seed": cfg.base_seed, "window_s": args.window, "filter": args.filter},
        "pairs": records,
        "probe_best_family": {str(p): f.value for p, f in sorted(probe_family.items())},
        "cdf": aggregate_cdf(results) if results else {},
    }
    write_json(args.output, doc)
    write_manifest(args, started, [args.input], [args.output], cfg.base_seed)
    failed = sum(1 for r in records if "error" in r)
    logger.info("simulated %d pairs, %d skipped", len(records) - failed, failed)
    return 0


RATIO_PERCENTILES = list(range(0, 101))


def cmd_classify(args) -> int:
    started = time.time()
    categories = {c.value: 0 for c in PairClassification}
    groups = {g.value: 0 for g in SegmentGroup}
    group_detail = defaultdict(int)
    pairs, excluded = [], []
    classes = {}
    ratios: List[float] = []
    for key, (raw, samples) in _pairs(args).items():
        ratios.extend(ratio_series(samples))
        if len(raw) < args.min_samples or len(samples) < 30:
            excluded.append({**_key_json(key), "n": len(raw), "reason": "too few samples"})
            continue
        result = analyse_pair(key, raw, samples)
        classes[key] = result.classification
        categories[result.classification.value] += 1
        groups[result.group.value] += 1
        group_detail[f"{result.group.value}:{result.classification.value}"] += 1
        pairs.append({
            **_key_json(key),
            "n_paired": result.n_paired,
            "n_filtered": result.n_filtered,
            "classification": result.classification.value,
            "group": result.group.value,
            "segments": [[a, b] for a, b in result.segments],
            "segment_classes": [c.value for c in result.segment_classes],
        })
    probes = {
        str(probe): {"best_family": r.best_family.value, "ratio_best": r.ratio_best, "ratio_none": r.ratio_none}
        for probe, r in probe_best_ratio(classes).items()
    }
    ratio_quantiles = (
        [[q, float(v)] for q, v in zip(RATIO_PERCENTILES, np.percentile(ratios, RATIO_PERCENTILES))]
        if ratios else []
    )
    doc = {
        "categories": categories,
        "groups": groups,
        "groups_by_category": dict(sorted(group_detail.items())),
        "pairs": pairs,
        "excluded": excluded,
        "probes": probes,
        "ratio_percentiles": ratio_quantiles,
        "n_comparisons": len(ratios),
    }
    write_json(args.output, doc)
    write_manifest(args, started, [args.input], [args.output])
    return 0


def read_connections(path) -> List[Connection]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "destination":
                continue
            if len(row) != 3:
                raise ParseError(lineno, f"expected 3 fields, got {len(row)}")
            try:
                out.append(Connection(row[0].strip(), row[1].strip(), float(row[2])))
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
    return out


def cmd_report(args) -> int:
    started = time.time()
    report = experiment_report(read_connections(args.input), args.min_tests, args.warmup)
    write_json(args.output, {"min_tests": args.min_tests, "warmup": args.warmup, "destinations": report})
    write_manifest(args, started, [args.input], [args.output])
    return 0


def cmd_sendfeedback(args) -> int:
    msg = FeedbackMessage.handshake(args.name, args.family, args.ms)
    send_feedback(msg, args.target)
    return 0


def cmd_proxy(args) -> int:
    from afsel.proxy import ProxyConfig, ProxyServer

    config = ProxyConfig(
        listen=args.listen,
        upstream=args.upstream,
        gamma=args.gamma,
        steer=args.steer,
        empty_a=args.empty_a,
        feedback=None if args.no_feedback else args.feedback,
        suffix_file=args.suffix_file,
        upstream_timeout=args.timeout,
        seed=args.seed,
    )
    try:
        asyncio.run(ProxyServer(config).serve_forever())
    except KeyboardInterrupt:
        pass
    return 0


COMMANDS = {
    "proxy": cmd_proxy,
    "simulate": cmd_simulate,
    "classify": cmd_classify,
    "report": cmd_report,
    "sendfeedback": cmd_sendfeedback,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        parser = build_parser()
    except UsageError as exc:
        print(f"afsel: error: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (ParseError, FeedbackError, OSError, ValueError) as exc:
        print(f"afsel {args.command}: {exc}", file=sys.stderr)
        return 1
