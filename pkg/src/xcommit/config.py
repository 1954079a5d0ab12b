"""Run configuration: validation, flat key = value file format, stable digest."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Union

from .kernel import SimParams
from .node import ChainParams
from .protocols import ProtocolKind


class ConfigInvalid(ValueError):
    pass


CHAIN_FIELDS = ("n_nodes", "delta", "sigma", "block_interval", "fork_prob", "max_fork_depth")
INT_CHAIN_FIELDS = ("n_nodes", "max_fork_depth")


@dataclass(frozen=True)
class RunConfig:
    protocol: ProtocolKind = ProtocolKind.SBP
    n_chains: int = 3
    nodes_per_chain: int = 3
    entities_per_chain: int = 100
    initial_balance: int = 1000
    n_transactions: int = 1000
    legs_per_txn: int = 2
    arrival_rate: float = 20.0
    zipf_exponent: float = 0.0
    # network and failures
    tau: float = 0.05
    latency_jitter: float = 0.0
    f: float = 1.0
    lambda_budget: int = 0
    crash_rate: float = 0.0
    crash_non_proxy: bool = False
    # chains (uniform; see overrides)
    delta: float = 2.0
    sigma: float = 0.1
    block_interval: float = 0.05
    fork_prob: float = 0.0
    max_fork_depth: int = 2
    # protocol knobs
    hub_capacity: int = 16
    hub_chain: int = 1
    literal_wait: bool = False
    # run control
    seed: int = 0
    event_cap: Optional[int] = None
    window_sample_interval: float = 0.0
    record_events: bool = False
    overrides: Dict[int, Dict[str, float]] = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if isinstance(self.protocol, str) and not isinstance(self.protocol, ProtocolKind):
            object.__setattr__(self, "protocol", ProtocolKind.parse(self.protocol))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- derived parameter objects -------------------------------------------

    def chain_params(self, chain: int) -> ChainParams:
        values = dict(n_nodes=self.nodes_per_chain, delta=self.delta, sigma=self.sigma,
                      block_interval=self.block_interval, fork_prob=self.fork_prob,
                      max_fork_depth=self.max_fork_depth)
        for k, v in self.overrides.get(chain, {}).items():
            values[k] = v
        values["n_nodes"] = int(values["n_nodes"])
        values["max_fork_depth"] = int(values["max_fork_depth"])
        return ChainParams(chain=chain, **values)

    def all_chain_params(self):
        return [self.chain_params(i) for i in range(1, self.n_chains + 1)]

    def sim_params(self) -> SimParams:
        return SimParams(tau=self.tau, f=self.f, lambda_budget=self.lambda_budget,
                         seed=self.seed, latency_jitter=self.latency_jitter)

    def livelock_cap(self) -> int:
        if self.event_cap is not None:
            return self.event_cap
        return 10 ** 7 * max(1, -(-self.n_transactions // 1000))

    def coordinator_deadline(self) -> float:
        sigma_bar = max(p.sigma for p in self.all_chain_params())
        return 2 * self.tau * (1 + self.latency_jitter) + 2 * sigma_bar + self.f

    # -- validation ----------------------------------------------------------

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigInvalid(msg)

        need(self.n_chains >= 2, "need at least 2 chains")
        need(2 <= self.legs_per_txn <= self.n_chains, "legs_per_txn must lie in [2, n_chains]")
        need(self.nodes_per_chain >= 1, "nodes_per_chain must be positive")
        need(self.entities_per_chain >= 1, "entities_per_chain must be positive")
        need(self.initial_balance >= 0, "initial_balance must be non-negative")
        need(self.n_transactions >= 0, "n_transactions must be non-negative")
        need(self.arrival_rate > 0, "arrival_rate must be positive")
        need(self.zipf_exponent >= 0, "zipf_exponent must be non-negative")
        need(self.crash_rate >= 0, "crash_rate must be non-negative")
        need(self.hub_capacity >= 1, "hub_capacity must be positive")
        need(1 <= self.hub_chain <= self.n_chains, "hub_chain must name an existing chain")
        need(self.window_sample_interval >= 0, "window_sample_interval must be non-negative")
        for chain in self.overrides:
            need(1 <= chain <= self.n_chains, f"override for unknown chain {chain}")
            for k in self.overrides[chain]:
                need(k in CHAIN_FIELDS, f"unknown per-chain key {k!r}")
        try:
            self.sim_params()
            params = self.all_chain_params()
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc
        if self.protocol is ProtocolKind.TPC:
            need(self.lambda_budget == 0, "2PC baseline runs only with lambda_budget = 0")
            need(all(p.fork_prob == 0 for p in params), "2PC baseline runs only with fork_prob = 0")
        return self

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for fld in fields(self):
            if fld.name == "overrides":
                continue
            value = getattr(self, fld.name)
            if isinstance(value, ProtocolKind):
                value = value.value
            elif value is None:
                value = "none"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif fld.type == "float":
                value = repr(float(value))
            lines.append(f"{fld.name} = {value}")
        for chain in sorted(self.overrides):
            for k in sorted(self.overrides[chain]):
                v = self.overrides[chain][k]
                v = int(v) if k in INT_CHAIN_FIELDS else repr(float(v))
                lines.append(f"chain.{chain}.{k} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        changes: Dict[str, object] = {}
        overrides: Dict[int, Dict[str, float]] = {c: dict(v) for c, v in base.overrides.items()}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("chain."):
                parts = key.split(".")
                if len(parts) != 3 or not parts[1].isdigit() or parts[2] not in CHAIN_FIELDS:
                    raise ConfigInvalid(f"line {lineno}: bad per-chain key {key!r}")
                overrides.setdefault(int(parts[1]), {})[parts[2]] = _num(value, lineno)
                continue
            if key not in types or key == "overrides":
                raise ConfigInvalid(f"line {lineno}: unknown key {key!r}")
            changes[key] = _coerce(key, types[key], value, lineno)
        changes["overrides"] = overrides
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def _num(value: str, lineno: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigInvalid(f"line {lineno}: {value!r} is not a number") from None


def _coerce(key: str, typ: str, value: str, lineno: int):
    try:
        if key == "protocol":
            return ProtocolKind.parse(value)
        if "Optional[int]" in typ:
            return None if value.lower() == "none" else int(value)
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigInvalid(f"line {lineno}: bad value {value!r} for {key}") from None
    raise ConfigInvalid(f"line {lineno}: unsupported key {key!r}")
