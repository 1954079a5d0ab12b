"""Exhaustive small-scope exploration of one transaction over two chains.

The explorer drives the pure protocol machines directly, without timing.
From every reachable world it tries every enabled action:

    deliver any in-flight message       land a submitted leg
    finalize a landed leg               fire the coordinator timeout (spuriously, too)
    crash one chain's proxy (once)      fail over / recover the crashed chain
    drain the recycle pool              cut a landed, non-final leg (once, if enabled)

It checks atomicity in every world, and that every world with no progress
action left is a proper terminal state (no deadlock).

Two timing facts of the simulator are kept as ordering rules:
* a chain whose proxy is down handles nothing until it fails over;
* messages one chain sent in an older proxy epoch are delivered before any
  message it sent in a newer one (detection takes at least one heartbeat
  interval, which exceeds the spread of network latencies).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .chain import EntityId, Ledger
from .protocols import (CoordinatorState, CoordPhase, Cut, Finalized, Landed, Msg, MsgKind,
                        ParticipantState, PartPhase, ProtocolConfig, ProtocolKind, Requeue, Restart,
                        Send, SetTimer, Start, Submit, Timeout, coordinator_step, participant_step)

CHAINS = (1, 2)
TXN = 7
FOREIGN = 999
COORD_KINDS = (MsgKind.READY, MsgKind.ABORT_VOTE, MsgKind.DONE, MsgKind.RECYCLE)


@dataclass(frozen=True)
class Scenario:
    kind: ProtocolKind = ProtocolKind.SBP
    balance: int = 100
    amount: int = 10
    pre_locked: bool = False
    crash: bool = True
    forks: bool = False
    max_attempts: int = 3

    @property
    def name(self) -> str:
        bits = [self.kind.value]
        if self.pre_locked:
            bits.append("lock-conflict")
        if self.balance < self.amount:
            bits.append("insufficient-funds")
        if self.crash:
            bits.append("crash")
        if self.forks:
            bits.append("fork")
        return "/".join(bits)


@dataclass(frozen=True)
class World:
    coord: CoordinatorState
    parts: Tuple[ParticipantState, ParticipantState]
    ledgers: Tuple[Ledger, Ledger]
    msgs: Tuple[Msg, ...] = ()
    timer: Optional[int] = None
    mempool: Tuple[bool, bool] = (False, False)
    landed: Tuple[bool, bool] = (False, False)
    final: Tuple[bool, bool] = (False, False)
    down: Optional[int] = None
    crashed: bool = False
    cut_used: bool = False
    epochs: Tuple[int, int] = (0, 0)
    requeued: bool = False
    recycled: int = 0

    def key(self):
        return (self.coord, self.parts, self.ledgers[0].key(), self.ledgers[1].key(), self.msgs,
                self.timer, self.mempool, self.landed, self.final, self.down, self.crashed,
                self.cut_used, self.epochs, self.requeued, self.recycled)


@dataclass
class ExploreResult:
    scenario: Scenario
    states: int = 0
    terminals: int = 0
    committed: int = 0
    aborted: int = 0
    errors: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors and self.terminals > 0


def _set(pair, i, v):
    return (v, pair[1]) if i == 0 else (pair[0], v)


class _Explorer:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.cfg = ProtocolConfig(sc.kind, deadline=1.0, max_retries=1)

    def initial(self) -> World:
        sc = self.sc
        ledgers = []
        for c in CHAINS:
            led = Ledger.uniform(c, 1, sc.balance)
            if sc.pre_locked and c == 2:
                led = led.lock(EntityId(2, 0), FOREIGN)
            ledgers.append(led)
        # chain 1 pays, chain 2 receives; chain 1 also coordinates
        parts = (ParticipantState(TXN, 1, 1, EntityId(1, 0), -sc.amount, 1.0),
                 ParticipantState(TXN, 2, 1, EntityId(2, 0), sc.amount, 1.0))
        w = World(CoordinatorState(TXN, 1, CHAINS), parts, tuple(ledgers))
        return self._coord(w, Start())

    # -- applying machine outputs ---------------------------------------------

    def _emit(self, w: World, src: int, out) -> World:
        msgs = list(w.msgs)
        for o in out:
            if isinstance(o, Send):
                msgs.append(Msg(o.kind, TXN, src, o.dst, o.attempt, w.epochs[src - 1]))
            elif isinstance(o, SetTimer) and isinstance(o.token, Timeout):
                w = _replace(w, timer=o.token.attempt)
            elif isinstance(o, Submit):
                if not w.landed[src - 1]:
                    w = _replace(w, mempool=_set(w.mempool, src - 1, True))
            elif isinstance(o, Requeue):
                w = _replace(w, requeued=True, recycled=w.recycled + 1)
        return _replace(w, msgs=tuple(sorted(msgs)))

    def _coord(self, w: World, event) -> World:
        st, out = coordinator_step(w.coord, event, self.cfg)
        return self._emit(_replace(w, coord=st), 1, out)

    def _part(self, w: World, c: int, event) -> World:
        i = c - 1
        ps, led, out = participant_step(w.parts[i], event, w.ledgers[i], self.cfg)
        w = _replace(w, parts=_set(w.parts, i, ps), ledgers=_set(w.ledgers, i, led))
        return self._emit(w, c, out)

    # -- successor relation ------------------------------------------------------

    def successors(self, w: World):
        """Yields (label, world, progress) for every enabled action."""
        up = [c != w.down for c in CHAINS]
        seen = set()
        for j, m in enumerate(w.msgs):
            if not up[m.dst - 1] or m in seen:
                continue
            if any(o.src == m.src and o.epoch < m.epoch for o in w.msgs):
                continue
            seen.add(m)
            rest = _replace(w, msgs=w.msgs[:j] + w.msgs[j + 1:])
            if m.kind in COORD_KINDS:
                yield f"deliver {m.kind.name} to coordinator", self._coord(rest, m), True
            else:
                yield f"deliver {m.kind.name} to chain {m.dst}", self._part(rest, m.dst, m), True
        for c in CHAINS:
            i = c - 1
            if not up[i]:
                continue
            if w.mempool[i]:
                nw = _replace(w, mempool=_set(w.mempool, i, False), landed=_set(w.landed, i, True))
                yield f"land on {c}", self._part(nw, c, Landed(TXN)), True
            if w.landed[i] and not w.final[i]:
                nw = _replace(w, final=_set(w.final, i, True))
                yield f"finalize on {c}", self._part(nw, c, Finalized(TXN)), True
                if self.sc.forks and not w.cut_used:
                    nw = _replace(w, landed=_set(w.landed, i, False), cut_used=True)
                    if self.sc.kind is not ProtocolKind.RBP:
                        nw = _replace(nw, mempool=_set(nw.mempool, i, True))
                    yield f"cut on {c}", self._part(nw, c, Cut(TXN)), False
        if up[0]:
            if (w.timer is not None and w.timer == w.coord.attempt
                    and w.coord.phase is CoordPhase.PRECOMMIT_SENT and w.coord.attempt + 1 < self.sc.max_attempts):
                yield "timeout", self._coord(_replace(w, timer=None), Timeout(w.timer)), True
            if w.requeued:
                yield "drain pool", self._coord(_replace(w, requeued=False), Restart()), True
        if w.down is not None:
            i = w.down - 1
            yield f"fail over {w.down}", _replace(w, down=None, epochs=_set(w.epochs, i, w.epochs[i] + 1)), True
        elif self.sc.crash and not w.crashed:
            for c in CHAINS:
                yield f"crash {c}", _replace(w, down=c, crashed=True), False

    # -- checks --------------------------------------------------------------------

    def invariant(self, w: World) -> Optional[str]:
        applied = [p.applied for p in w.parts]
        if w.coord.phase is CoordPhase.ABORTED and any(applied):
            return "aborted transaction has an applied leg"
        if self.sc.kind is ProtocolKind.SBP:
            if w.coord.phase is CoordPhase.COMMITTED and not all(w.final):
                return "SBP committed before both legs were final"
            if w.recycled:
                return "SBP transaction was recycled"
        for p in w.parts:
            if p.phase is PartPhase.ABORTED and p.applied:
                return f"participant on chain {p.chain} aborted after applying"
        return None

    def terminal_problem(self, w: World) -> Optional[str]:
        own_locks = [led.holder(p.entity) == TXN for p, led in zip(w.parts, w.ledgers)]
        if any(own_locks):
            return "lock still held at quiescence"
        if w.coord.phase is CoordPhase.COMMITTED:
            if not all(p.applied for p in w.parts) or not all(w.final) or w.requeued:
                return "committed but not applied and final everywhere"
            return None
        if w.coord.phase is CoordPhase.ABORTED:
            return None
        return f"deadlock: coordinator stuck in {w.coord.phase.value}"


def _replace(w: World, **changes) -> World:
    d = dict(w.__dict__)
    d.update(changes)
    return World(**d)


def explore(sc: Scenario, max_states: int = 2_000_000) -> ExploreResult:
    ex = _Explorer(sc)
    res = ExploreResult(sc)
    start = ex.initial()
    seen: Dict[tuple, None] = {start.key(): None}
    queue = deque([start])
    while queue:
        w = queue.popleft()
        res.states += 1
        if res.states > max_states:
            res.errors.append(f"state space exceeds {max_states}")
            break
        bad = ex.invariant(w)
        if bad:
            res.errors.append(bad)
            continue
        progress = False
        for label, nxt, is_progress in ex.successors(w):
            progress |= is_progress
            k = nxt.key()
            if k not in seen:
                seen[k] = None
                queue.append(nxt)
        if not progress:
            res.terminals += 1
            problem = ex.terminal_problem(w)
            if problem:
                res.errors.append(problem)
            elif w.coord.phase is CoordPhase.COMMITTED:
                res.committed += 1
            else:
                res.aborted += 1
    res.errors = sorted(set(res.errors))
    return res


DEFAULT_SCENARIOS = (
    Scenario(ProtocolKind.SBP),
    Scenario(ProtocolKind.SBP, pre_locked=True),
    Scenario(ProtocolKind.SBP, balance=5),
    Scenario(ProtocolKind.SBP, forks=True),
    Scenario(ProtocolKind.RBP),
    Scenario(ProtocolKind.RBP, forks=True),
    Scenario(ProtocolKind.TPC, crash=False),
    Scenario(ProtocolKind.HUB, crash=False),
)


def selftest(scenarios=DEFAULT_SCENARIOS) -> List[ExploreResult]:
    return [explore(sc) for sc in scenarios]
