"""Single runs, scaling sweeps and their serialized results."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .config import RunConfig
from .metrics import (audit_acid, check_latency_bound, check_message_bound, derived_bounds,
                      summarize)
from .protocols import ProtocolKind
from .simulation import simulate
from .trace import RunTrace, TxnMetrics

CSV_FIELDS = ("uuid", "protocol", "latency_ms", "messages", "lambda1", "lambda2", "recycles", "committed")
DEFAULT_CHAIN_COUNTS = (2, 4, 8, 16, 32, 64)
DEFAULT_PROTOCOLS = (ProtocolKind.RBP, ProtocolKind.TPC, ProtocolKind.HUB)


def aggregate_throughput(txns: Sequence[TxnMetrics]) -> float:
    """Committed transactions per second, from first submission to last commit mark."""
    commits = [t.commit for t in txns if t.committed]
    if not commits:
        return 0.0
    span = max(commits) - min(t.submit for t in txns)
    return len(commits) / span if span > 0 else 0.0


@dataclass
class ResultRecord:
    config_digest: str
    config_text: str
    protocol: str
    n_chains: int
    seed: int
    txns: List[TxnMetrics] = field(default_factory=list)
    throughput: float = 0.0
    latency: Dict[str, Optional[float]] = field(default_factory=dict)
    committed: int = 0
    aborted: int = 0
    audit: Dict[str, dict] = field(default_factory=dict)
    message_bound: Tuple[int, int] = (0, 0)  # (passed, checked)
    latency_bound: Tuple[int, int] = (0, 0)
    violations: List[str] = field(default_factory=list)
    heartbeat_idle: int = 0
    protocol_messages: int = 0

    @property
    def audit_ok(self) -> bool:
        return all(v["ok"] for v in self.audit.values())

    @property
    def bounds_ok(self) -> bool:
        return self.message_bound[0] == self.message_bound[1] and self.latency_bound[0] == self.latency_bound[1]

    @property
    def ok(self) -> bool:
        return self.audit_ok and self.bounds_ok

    def config(self) -> RunConfig:
        return RunConfig.from_text(self.config_text)

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest, "config_text": self.config_text,
            "protocol": self.protocol, "n_chains": self.n_chains, "seed": self.seed,
            "txns": [t.to_dict() for t in self.txns], "throughput": self.throughput,
            "latency": dict(self.latency), "committed": self.committed, "aborted": self.aborted,
            "audit": self.audit, "message_bound": list(self.message_bound),
            "latency_bound": list(self.latency_bound), "violations": list(self.violations),
            "heartbeat_idle": self.heartbeat_idle, "protocol_messages": self.protocol_messages,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        d = dict(d)
        d["txns"] = [TxnMetrics.from_dict(t) for t in d["txns"]]
        d["message_bound"] = tuple(d["message_bound"])
        d["latency_bound"] = tuple(d["latency_bound"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ResultRecord":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for t in self.txns:
            lat = "" if t.latency is None else repr(t.latency * 1000.0)
            w.writerow([t.uuid, t.protocol, lat, t.messages_total, t.lambda1, t.lambda2,
                        t.recycle_count, int(t.committed)])
        return buf.getvalue()


def parse_csv(text: str) -> List[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        out.append({
            "uuid": int(r["uuid"]), "protocol": r["protocol"],
            "latency_ms": float(r["latency_ms"]) if r["latency_ms"] else None,
            "messages": int(r["messages"]), "lambda1": int(r["lambda1"]), "lambda2": int(r["lambda2"]),
            "recycles": int(r["recycles"]), "committed": bool(int(r["committed"])),
        })
    return out


def record_from_trace(config: RunConfig, trace: RunTrace) -> ResultRecord:
    bounds = derived_bounds(config.all_chain_params())
    eps = 2 * trace.block_interval
    msg_ok = msg_n = lat_ok = lat_n = 0
    for t in trace.txns:
        if t.committed or t.abort is not None:
            msg_n += 1
            msg_ok += check_message_bound(t, bounds).ok
        if trace.protocol == ProtocolKind.SBP.value and t.committed:
            lat_n += 1
            lat_ok += check_latency_bound(t, bounds, trace.f, trace.tau_max, eps).ok
    committed = [t for t in trace.txns if t.committed]
    return ResultRecord(
        config_digest=config.digest(), config_text=config.to_text(), protocol=trace.protocol,
        n_chains=config.n_chains, seed=config.seed, txns=list(trace.txns),
        throughput=aggregate_throughput(trace.txns),
        latency=summarize(t.latency for t in committed),
        committed=len(committed), aborted=sum(1 for t in trace.txns if t.abort is not None),
        audit=audit_acid(trace).to_dict(), message_bound=(msg_ok, msg_n), latency_bound=(lat_ok, lat_n),
        violations=list(trace.violations), heartbeat_idle=trace.heartbeat_idle,
        protocol_messages=trace.protocol_messages())


def run_experiment(config: RunConfig) -> ResultRecord:
    return record_from_trace(config, simulate(config))


def scaling_config(base: RunConfig, protocol: ProtocolKind, n_chains: int) -> RunConfig:
    """Same per-chain load as `base` (arrival_rate / n_chains), spread over `n_chains` chains."""
    per_chain = base.arrival_rate / base.n_chains
    overrides = {c: v for c, v in base.overrides.items() if c <= n_chains}
    return base.replace(protocol=protocol, n_chains=n_chains, arrival_rate=per_chain * n_chains,
                        legs_per_txn=min(base.legs_per_txn, n_chains),
                        hub_chain=min(base.hub_chain, n_chains), overrides=overrides)


def run_scaling(base: RunConfig, chain_counts: Sequence[int] = DEFAULT_CHAIN_COUNTS,
                protocols: Sequence[ProtocolKind] = DEFAULT_PROTOCOLS,
                progress=None) -> List[ResultRecord]:
    out = []
    for n in chain_counts:
        for p in protocols:
            cfg = scaling_config(base, ProtocolKind.parse(p) if isinstance(p, str) else p, n).validate()
            rec = run_experiment(cfg)
            out.append(rec)
            if progress is not None:
                progress(rec)
    return out


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = [math.log(x) for x in xs]
    ly = [math.log(y) for y in ys]
    mx = sum(lx) / len(lx)
    my = sum(ly) / len(ly)
    sxx = sum((a - mx) ** 2 for a in lx)
    return sum((a - mx) * (b - my) for a, b in zip(lx, ly)) / sxx


def scaling_table(records: Sequence[ResultRecord]) -> List[dict]:
    """One row per chain count: throughput per protocol and RBP overhead relative to 2PC."""
    by_n: Dict[int, Dict[str, float]] = {}
    for r in records:
        by_n.setdefault(r.n_chains, {})[r.protocol] = r.throughput
    rows = []
    for n in sorted(by_n):
        row = {"chains": n, **by_n[n]}
        rbp, tpc = by_n[n].get("RBP"), by_n[n].get("2PC")
        if rbp is not None and tpc:
            row["rbp_overhead_pct"] = 100.0 * (tpc - rbp) / tpc
        rows.append(row)
    return rows


def save_record(record: ResultRecord, path: Union[str, Path]) -> None:
    Path(path).write_text(record.to_json())


def load_record(path: Union[str, Path]) -> ResultRecord:
    return ResultRecord.from_json(Path(path).read_text())
