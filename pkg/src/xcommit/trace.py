"""Immutable run records: per-transaction metrics, per-chain end state, RunTrace."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple


@dataclass
class TxnMetrics:
    uuid: int
    protocol: str
    coordinator: int
    legs: Tuple[Tuple[int, int, int], ...]  # (chain, account, delta)
    submit: float
    commit: Optional[float] = None
    abort: Optional[float] = None
    last_commit: Optional[float] = None
    settled: Optional[float] = None
    messages_total: int = 0
    messages_phase1: int = 0
    messages_phase2: int = 0
    lambda1: int = 0
    lambda2: int = 0
    recycle_count: int = 0
    heartbeat_messages: int = 0
    recycled_after_commit: bool = False

    @property
    def committed(self) -> bool:
        return self.commit is not None and self.abort is None

    @property
    def latency(self) -> Optional[float]:
        return None if self.commit is None else self.commit - self.submit

    @property
    def failures(self) -> int:
        return self.lambda1 + self.lambda2

    @property
    def chains(self) -> Tuple[int, ...]:
        return tuple(c for c, _, _ in self.legs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["legs"] = [list(leg) for leg in self.legs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TxnMetrics":
        d = dict(d)
        d["legs"] = tuple(tuple(leg) for leg in d["legs"])
        return cls(**d)


@dataclass
class ChainSummary:
    chain: int
    n_nodes: int
    delta: float
    initial: Dict[int, int]
    final: Dict[int, int]
    main_legs: Dict[int, int]  # uuid -> index of the main-branch block carrying the leg
    finalized_index: int
    locks: Dict[int, int]  # account -> holder uuid, at quiescence
    blocks: int = 0
    main_length: int = 0
    reorgs: int = 0
    cut_legs: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("initial", "final", "main_legs", "locks"):
            d[k] = sorted([int(a), int(b)] for a, b in getattr(self, k).items())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChainSummary":
        d = dict(d)
        for k in ("initial", "final", "main_legs", "locks"):
            d[k] = {int(a): int(b) for a, b in d[k]}
        return cls(**d)


@dataclass
class RunTrace:
    protocol: str
    config_digest: str
    seed: int
    tau_max: float
    f: float
    lambda_budget: int
    block_interval: float
    txns: List[TxnMetrics] = field(default_factory=list)
    chains: List[ChainSummary] = field(default_factory=list)
    violations: List[str] = field(default_factory=list)
    window_samples: List[Tuple[float, int, int]] = field(default_factory=list)
    n_events: int = 0
    end_time: float = 0.0
    event_digest: str = ""
    heartbeat_idle: int = 0
    heartbeat_attributed: int = 0
    stale_dropped: int = 0
    crashes: int = 0

    @classmethod
    def empty(cls, protocol: str = "SBP") -> "RunTrace":
        return cls(protocol=protocol, config_digest="", seed=0, tau_max=0.0, f=0.0,
                   lambda_budget=0, block_interval=0.0)

    def protocol_messages(self) -> int:
        return sum(t.messages_total for t in self.txns)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["txns"] = [t.to_dict() for t in self.txns]
        d["chains"] = [c.to_dict() for c in self.chains]
        d["window_samples"] = [list(s) for s in self.window_samples]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunTrace":
        d = dict(d)
        d["txns"] = [TxnMetrics.from_dict(t) for t in d.get("txns", [])]
        d["chains"] = [ChainSummary.from_dict(c) for c in d.get("chains", [])]
        d["window_samples"] = [tuple(s) for s in d.get("window_samples", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunTrace":
        return cls.from_dict(json.loads(text))
