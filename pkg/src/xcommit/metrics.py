"""Bound checks, the Poisson failure estimate, throughput and ACID audits."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Sized, Union

from .node import ChainParams
from .trace import RunTrace, TxnMetrics


class BoundViolated(AssertionError):
    pass


@dataclass(frozen=True)
class DerivedBounds:
    delta_max: float
    delta_min: float
    sigma_max: float
    total_nodes: int
    n_chains: int

    def __post_init__(self):
        if self.delta_min > self.delta_max:
            raise ValueError("delta_min exceeds delta_max")


def derived_bounds(chains: Sequence[ChainParams]) -> DerivedBounds:
    if not chains:
        raise ValueError("no chains")
    return DerivedBounds(
        delta_max=max(c.delta for c in chains),
        delta_min=min(c.delta for c in chains),
        sigma_max=max(c.sigma for c in chains),
        total_nodes=sum(c.n_nodes for c in chains),
        n_chains=len(chains),
    )


@dataclass(frozen=True)
class BoundCheck:
    ok: bool
    observed: float
    limit: float

    def __bool__(self) -> bool:
        return self.ok


def message_limit(failures: int, b: DerivedBounds) -> int:
    return 4 * max(1, failures) * b.total_nodes


def check_message_bound(t: TxnMetrics, b: DerivedBounds, strict: bool = False) -> BoundCheck:
    """messages_total <= 4 * max(1, lambda1 + lambda2) * |N|."""
    limit = message_limit(t.failures, b)
    res = BoundCheck(t.messages_total <= limit, t.messages_total, limit)
    if strict and not res.ok:
        raise BoundViolated(f"T{t.uuid}: {t.messages_total} messages > {limit}")
    return res


def latency_limit(failures: int, b: DerivedBounds, f: float, tau_max: float,
                  eps_sched: float) -> float:
    return 4 * tau_max + max(1, failures) * (f + b.delta_max) + eps_sched


def check_latency_bound(t: TxnMetrics, b: DerivedBounds, f: float, tau_max: float,
                        eps_sched: float, strict: bool = False) -> BoundCheck:
    """latency <= 4 tau_max + max(1, lambda1 + lambda2) (f + delta_max) + eps_sched."""
    if t.latency is None:
        raise ValueError(f"T{t.uuid} never committed")
    limit = latency_limit(t.failures, b, f, tau_max, eps_sched)
    # the tiny slack absorbs float rounding of sums of timestamps
    res = BoundCheck(t.latency <= limit + 1e-9, t.latency, limit)
    if strict and not res.ok:
        raise BoundViolated(f"T{t.uuid}: latency {t.latency:.6f} > {limit:.6f}")
    return res


def poisson_failure_prob(lam: float, k: int) -> float:
    """P(k failures) for a Poisson count with mean lam."""
    if lam < 0 or k < 0:
        raise ValueError("lam and k must be non-negative")
    if lam == 0:
        return 1.0 if k == 0 else 0.0
    if k <= 20:
        return lam ** k * math.exp(-lam) / math.factorial(k)
    return math.exp(k * math.log(lam) - lam - math.lgamma(k + 1))


def throughput(window: Union[Sized, float], delta: float) -> float:
    """Committed transactions per second implied by a sliding window over delta.

    `window` is a window object or an entry count (possibly time-averaged).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    n = window if isinstance(window, (int, float)) else len(window)
    return n / delta


def summarize(values: Iterable[float]) -> Dict[str, Optional[float]]:
    xs = sorted(values)
    if not xs:
        return {"n": 0, "min": None, "median": None, "p99": None, "max": None}
    p99 = xs[min(len(xs) - 1, math.ceil(0.99 * len(xs)) - 1)]
    return {"n": len(xs), "min": xs[0], "median": statistics.median(xs), "p99": p99, "max": xs[-1]}


# ---------------------------------------------------------------------------
# ACID audit


@dataclass
class Verdict:
    ok: bool = True
    failures: List[str] = field(default_factory=list)

    def fail(self, why: str) -> None:
        self.ok = False
        self.failures.append(why)


@dataclass
class AuditReport:
    atomicity: Verdict
    consistency: Verdict
    isolation: Verdict
    durability: Verdict

    @property
    def ok(self) -> bool:
        return all(v.ok for v in (self.atomicity, self.consistency, self.isolation, self.durability))

    def to_dict(self) -> dict:
        return {k: {"ok": v.ok, "failures": list(v.failures)}
                for k, v in (("atomicity", self.atomicity), ("consistency", self.consistency),
                             ("isolation", self.isolation), ("durability", self.durability))}


def audit_acid(trace: RunTrace) -> AuditReport:
    atom, cons, iso, dur = Verdict(), Verdict(), Verdict(), Verdict()
    chains = {c.chain: c for c in trace.chains}

    for t in trace.txns:
        present = [c in chains and t.uuid in chains[c].main_legs for c in t.chains]
        if any(present) and not all(present):
            atom.fail(f"T{t.uuid}: legs on main branch of only {sum(present)}/{len(present)} chains")
        elif t.committed and not all(present):
            atom.fail(f"T{t.uuid}: committed but legs missing from the main branches")
        elif not t.committed and any(present):
            atom.fail(f"T{t.uuid}: not committed but its legs are on the main branches")
        if t.committed:
            for c in t.chains:
                s = chains.get(c)
                if s is None or t.uuid not in s.main_legs:
                    continue
                if s.main_legs[t.uuid] > s.finalized_index:
                    dur.fail(f"T{t.uuid}: leg on chain {c} at index {s.main_legs[t.uuid]} "
                             f"beyond finalized index {s.finalized_index}")
        if trace.protocol == "SBP" and t.recycled_after_commit:
            cons.fail(f"T{t.uuid}: committed SBP transaction was recycled")

    initial_total = sum(sum(c.initial.values()) for c in trace.chains)
    final_total = sum(sum(c.final.values()) for c in trace.chains)
    if initial_total != final_total:
        cons.fail(f"balance not conserved: {initial_total} -> {final_total}")

    # each chain's working balances must equal genesis state plus its main-branch legs
    deltas: Dict[int, Dict[int, int]] = {c: {} for c in chains}
    by_uuid = {t.uuid: t for t in trace.txns}
    for c, s in chains.items():
        for u in s.main_legs:
            t = by_uuid.get(u)
            if t is None:
                cons.fail(f"chain {c}: unknown transaction T{u} on main branch")
                continue
            for chain, account, delta in t.legs:
                if chain == c:
                    deltas[c][account] = deltas[c].get(account, 0) + delta
        for account, bal in s.final.items():
            if bal < 0:
                cons.fail(f"chain {c}: account {account} negative ({bal})")
            expect = s.initial.get(account, 0) + deltas[c].get(account, 0)
            if bal != expect:
                cons.fail(f"chain {c}: account {account} holds {bal}, main branch implies {expect}")

    for v in trace.violations:
        if v.startswith("lock:"):
            iso.fail(v)
        elif v.startswith("stalled:"):
            atom.fail(v)
        else:
            cons.fail(v)
    for c, s in chains.items():
        for account, holder in s.locks.items():
            iso.fail(f"chain {c}: account {account} still locked by T{holder} at quiescence")

    return AuditReport(atom, cons, iso, dur)
