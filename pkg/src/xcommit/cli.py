"""Command line: run, scale, audit, selftest.

Exit codes: 0 success with every audit and bound check passing, 2 audit or
bound violation, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigInvalid, RunConfig
from .experiment import (DEFAULT_CHAIN_COUNTS, DEFAULT_PROTOCOLS, record_from_trace, run_scaling,
                         scaling_table)
from .explore import selftest
from .metrics import audit_acid
from .protocols import ProtocolKind
from .simulation import simulate
from .trace import RunTrace

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 2, 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    changes = {}
    if getattr(args, "protocol", None):
        try:
            changes["protocol"] = ProtocolKind.parse(args.protocol)
        except ValueError:
            raise ConfigInvalid(f"unknown protocol {args.protocol!r}") from None
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "transactions", None) is not None:
        changes["n_transactions"] = args.transactions
    return cfg.replace(**changes).validate()


def _print_audit(report: dict) -> None:
    for name, v in report.items():
        status = "ok" if v["ok"] else f"FAIL ({len(v['failures'])})"
        print(f"  {name:<12} {status}")
        for why in v["failures"][:5]:
            print(f"    - {why}")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    trace = simulate(cfg)
    rec = record_from_trace(cfg, trace)
    print(f"{rec.protocol}: {len(rec.txns)} txns, {rec.committed} committed, {rec.aborted} aborted, "
          f"throughput {rec.throughput:.2f} tx/s, digest {rec.config_digest}")
    if rec.latency.get("median") is not None:
        print(f"  latency median {rec.latency['median'] * 1000:.1f} ms, p99 {rec.latency['p99'] * 1000:.1f} ms")
    print(f"  message bound {rec.message_bound[0]}/{rec.message_bound[1]}, "
          f"latency bound {rec.latency_bound[0]}/{rec.latency_bound[1]}")
    _print_audit(rec.audit)
    if args.out:
        Path(args.out).write_text(rec.to_json())
    if args.csv:
        Path(args.csv).write_text(rec.to_csv())
    if args.trace:
        Path(args.trace).write_text(trace.to_json())
    return EXIT_OK if rec.ok else EXIT_VIOLATION


def cmd_scale(args) -> int:
    base = _load_config(args)
    counts = [int(x) for x in args.chains.split(",") if x.strip()]
    try:
        protocols = ([ProtocolKind.parse(p) for p in args.protocols.split(",")]
                     if args.protocols else DEFAULT_PROTOCOLS)
    except ValueError:
        raise ConfigInvalid(f"unknown protocol in {args.protocols!r}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        print(f"  {rec.protocol:<4} {rec.n_chains:>3} chains: {rec.throughput:9.2f} tx/s"
              f"{'' if rec.ok else '  (violations)'}", flush=True)
        name = f"{rec.protocol.lower()}-{rec.n_chains}"
        (out / f"{name}.json").write_text(rec.to_json())
        (out / f"{name}.csv").write_text(rec.to_csv())

    records = run_scaling(base, counts, protocols, progress=progress)
    rows = scaling_table(records)
    (out / "scaling.json").write_text(json.dumps(rows, indent=1))
    for row in rows:
        print("  " + ", ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK if all(r.ok for r in records) else EXIT_VIOLATION


def cmd_audit(args) -> int:
    trace = RunTrace.from_json(Path(args.trace).read_text())
    report = audit_acid(trace)
    print(f"{trace.protocol} trace, {len(trace.txns)} txns, config {trace.config_digest}")
    _print_audit(report.to_dict())
    return EXIT_OK if report.ok else EXIT_VIOLATION


def cmd_selftest(args) -> int:
    ok = True
    for r in selftest():
        ok &= r.ok
        print(f"  {r.scenario.name:<32} {r.states:>7} states {r.terminals:>4} terminal "
              f"({r.committed} committed, {r.aborted} aborted) {'ok' if r.ok else 'FAIL'}")
        for e in r.errors[:5]:
            print(f"    - {e}")
    return EXIT_OK if ok else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xcommit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one configuration")
    run.add_argument("--config", required=True)
    run.add_argument("--protocol")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="write the ResultRecord as JSON")
    run.add_argument("--csv", help="write one CSV row per transaction")
    run.add_argument("--trace", help="write the full RunTrace as JSON (input for `audit`)")
    run.set_defaults(fn=cmd_run)

    scale = sub.add_parser("scale", help="throughput versus chain count")
    scale.add_argument("--config", required=True)
    scale.add_argument("--chains", default=",".join(map(str, DEFAULT_CHAIN_COUNTS)))
    scale.add_argument("--protocols", help="comma list, default RBP,2PC,HUB")
    scale.add_argument("--transactions", type=int)
    scale.add_argument("--seed", type=int)
    scale.add_argument("--out", required=True)
    scale.set_defaults(fn=cmd_scale)

    audit = sub.add_parser("audit", help="ACID audit of a saved trace")
    audit.add_argument("--trace", required=True)
    audit.set_defaults(fn=cmd_audit)

    st = sub.add_parser("selftest", help="exhaustive small-scope interleaving check")
    st.set_defaults(fn=cmd_selftest)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigInvalid, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
