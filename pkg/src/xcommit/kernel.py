"""Deterministic discrete-event kernel.

One virtual clock, one event heap ordered by (fire_at, sequence), a network
with latency tau and persistent delivery, and crash injection with recovery
time f under a per-transaction failure budget.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import random
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Tuple

from .chain import NodeId


class EventKind(IntEnum):
    MESSAGE = 1
    TIMER = 2
    CRASH = 3
    RECOVER = 4
    BLOCK = 5
    ARRIVAL = 6


class SimError(Exception):
    pass


class BudgetExhausted(SimError):
    pass


class LivelockDetected(SimError):
    pass


@dataclass(frozen=True)
class SimParams:
    tau: float = 0.05
    f: float = 1.0
    lambda_budget: int = 0
    seed: int = 0
    latency_jitter: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.f < 0:
            raise ValueError("f must be non-negative")
        if self.lambda_budget < 0:
            raise ValueError("lambda_budget must be non-negative")
        if not 0 <= self.latency_jitter < 1:
            raise ValueError("latency_jitter must lie in [0, 1)")

    @property
    def tau_bounds(self) -> Tuple[float, float]:
        return self.tau * (1 - self.latency_jitter), self.tau * (1 + self.latency_jitter)


class SimEvent(NamedTuple):
    fire_at: float
    sequence: int
    kind: EventKind
    fn: Callable
    args: tuple


@dataclass(frozen=True)
class Envelope:
    msg_id: int
    src: NodeId
    dst: NodeId
    kind: int
    txn: int
    attempt: int = 0
    epoch: int = 0


@dataclass(frozen=True)
class KernelTrace:
    events: Tuple[Tuple[float, int, int], ...]
    n_events: int
    end_time: float

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(repr(self.events).encode())
        return h.hexdigest()


class Kernel:
    def __init__(self, params: SimParams, event_cap: Optional[int] = None, record: bool = True):
        self.params = params
        self.now = 0.0
        self.rng = random.Random(f"{params.seed}:network")
        self.event_cap = event_cap
        self._queue: List[SimEvent] = []
        self._seq = itertools.count()
        self._msg_ids = itertools.count(1)
        self._handlers: Dict[NodeId, Callable[[Envelope], None]] = {}
        self._down: Dict[NodeId, float] = {}
        self._parked: Dict[NodeId, List[Envelope]] = {}
        self._forward: Dict[NodeId, NodeId] = {}
        self.on_recover: Optional[Callable[[NodeId], None]] = None
        self.failures: Dict[int, int] = {}
        self.max_latency = 0.0
        self.sent = 0
        self.n_events = 0
        self._since_progress = 0
        self._log: Optional[list] = [] if record else None

    # -- scheduling --------------------------------------------------------

    def schedule(self, at: float, kind: EventKind, fn: Callable, *args) -> SimEvent:
        if at < self.now:
            raise SimError(f"cannot schedule in the past ({at} < {self.now})")
        ev = SimEvent(at, next(self._seq), kind, fn, args)
        heapq.heappush(self._queue, ev)
        return ev

    def after(self, delay: float, kind: EventKind, fn: Callable, *args) -> SimEvent:
        return self.schedule(self.now + delay, kind, fn, *args)

    def pending(self) -> int:
        return len(self._queue)

    def note_progress(self) -> None:
        self._since_progress = 0

    # -- network -----------------------------------------------------------

    def register(self, node: NodeId, handler: Callable[[Envelope], None]) -> None:
        self._handlers[node] = handler

    def envelope(self, src: NodeId, dst: NodeId, kind: int, txn: int,
                 attempt: int = 0, epoch: int = 0) -> Envelope:
        return Envelope(next(self._msg_ids), src, dst, kind, txn, attempt, epoch)

    def sample_latency(self) -> float:
        j = self.params.latency_jitter
        lat = self.params.tau if j == 0 else self.params.tau * (1 + self.rng.uniform(-j, j))
        if lat > self.max_latency:
            self.max_latency = lat
        return lat

    def send(self, env: Envelope) -> float:
        """Schedule delivery after a sampled latency; returns the delivery time."""
        self.sent += 1
        at = self.now + self.sample_latency()
        self.schedule(at, EventKind.MESSAGE, self._deliver, env)
        return at

    def _deliver(self, env: Envelope) -> None:
        self._redirected(env, env.dst)

    def redirect_parked(self, old: NodeId, new: NodeId) -> int:
        """Hand messages parked at a crashed node to another (live) node now.

        Messages still in flight to `old` follow the same route until it recovers.
        """
        for k, v in self._forward.items():
            if v == old:
                self._forward[k] = new
        self._forward[old] = new
        parked = self._parked.pop(old, [])
        for env in parked:
            self.schedule(self.now, EventKind.MESSAGE, self._redirected, env, new)
        return len(parked)

    def _redirected(self, env: Envelope, node: NodeId) -> None:
        hops = 0
        while node in self._down:
            nxt = self._forward.get(node)
            if nxt is None or hops > len(self._forward):
                self._parked.setdefault(node, []).append(env)
                return
            node = nxt
            hops += 1
        self._handlers[node](env)

    # -- failures ----------------------------------------------------------

    def is_up(self, node: NodeId) -> bool:
        return node not in self._down

    def down_until(self, node: NodeId) -> Optional[float]:
        return self._down.get(node)

    def inject_crash(self, node: NodeId, at: float, victims: Iterable[int] = ()) -> None:
        """Crash `node` during [at, at + f), charging every victim transaction."""
        budget = self.params.lambda_budget
        victims = list(victims)
        if budget == 0:
            raise BudgetExhausted("failure budget is zero")
        over = [v for v in victims if self.failures.get(v, 0) >= budget]
        if over:
            raise BudgetExhausted(f"transactions {over} already saw {budget} failure(s)")
        for v in victims:
            self.failures[v] = self.failures.get(v, 0) + 1
        self.schedule(at, EventKind.CRASH, self._crash, node, at + self.params.f)

    def _crash(self, node: NodeId, until: float) -> None:
        if node in self._down:
            self._down[node] = max(self._down[node], until)
        else:
            self._down[node] = until
        self.schedule(until, EventKind.RECOVER, self._recover, node, until)

    def _recover(self, node: NodeId, until: float) -> None:
        if self._down.get(node) != until:
            return
        del self._down[node]
        self._forward.pop(node, None)
        for env in self._parked.pop(node, []):
            self._handlers[node](env)
        if self.on_recover is not None:
            self.on_recover(node)

    # -- main loop ---------------------------------------------------------

    def run(self, until: Optional[float] = None) -> KernelTrace:
        q = self._queue
        pop = heapq.heappop
        log = self._log
        cap = self.event_cap
        while q:
            if until is not None and q[0].fire_at > until:
                self.now = until
                break
            ev = pop(q)
            self.now = ev.fire_at
            self.n_events += 1
            self._since_progress += 1
            if cap is not None and self._since_progress > cap:
                raise LivelockDetected(
                    f"{self._since_progress} events without progress at t={self.now:.6f}")
            if log is not None:
                log.append((ev.fire_at, int(ev.kind), ev.sequence))
            ev.fn(*ev.args)
        return KernelTrace(tuple(log or ()), self.n_events, self.now)
