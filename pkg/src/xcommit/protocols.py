"""Commit protocols as pure, message-driven state machines.

SBP and RBP are the two cross-chain protocols; TPC (two-phase commit) and HUB
(every transaction brokered by one designated chain) are baselines. The same
coordinator and participant machines serve all four kinds; the kind decides
when a participant may reply DONE:

    SBP  after the including block is finalized (delta has elapsed)
    RBP  right after the leg lands on the main branch; cut legs are recycled
    TPC  right after landing; no failover, no forks (enforced by config)
    HUB  TPC run by the hub chain on the requester's behalf

A step takes (state, input) and returns the new state plus a list of output
actions for the host (a simulator or the exhaustive explorer) to carry out.
Identical (state, input) always yields identical results.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Tuple, Union

from .chain import (AlreadyLocked, EntityId, InsufficientFunds, Ledger, TransactionRequest)


def replace(obj, **changes):
    """dataclasses.replace without re-running __init__; the state classes have no
    __post_init__, and this sits on the hot path of every simulated step."""
    new = object.__new__(type(obj))
    d = new.__dict__
    d.update(obj.__dict__)
    for k in changes:
        if k not in d:
            raise TypeError(f"{type(obj).__name__} has no field {k!r}")
    d.update(changes)
    return new


class ProtocolKind(str, Enum):
    SBP = "SBP"
    RBP = "RBP"
    TPC = "2PC"
    HUB = "HUB"

    @classmethod
    def parse(cls, text: str) -> "ProtocolKind":
        t = text.strip().upper()
        aliases = {"TPC": cls.TPC, "2PC": cls.TPC}
        if t in aliases:
            return aliases[t]
        return cls(t)


class MsgKind(IntEnum):
    PRECOMMIT = 1
    READY = 2
    ABORT_VOTE = 3
    COMMIT = 4
    DONE = 5
    ABORT = 6
    HB_PROBE = 7
    HB_ACK = 8
    HUB_FORWARD = 9
    HUB_ACK = 10
    RECYCLE = 11


PHASE_OF_KIND = {
    MsgKind.PRECOMMIT: 1, MsgKind.READY: 1, MsgKind.ABORT_VOTE: 1, MsgKind.HUB_FORWARD: 1,
    MsgKind.COMMIT: 2, MsgKind.DONE: 2, MsgKind.ABORT: 2, MsgKind.RECYCLE: 2, MsgKind.HUB_ACK: 2,
}


class ProtocolError(Exception):
    pass


class StaleEpoch(ProtocolError):
    pass


class UnknownTxn(ProtocolError):
    pass


class Msg(NamedTuple):
    kind: MsgKind
    txn: int
    src: int
    dst: int
    attempt: int = 0
    epoch: int = 0


# -- inputs that are not messages ----------------------------------------------

class Start(NamedTuple):
    pass


class Timeout(NamedTuple):
    attempt: int


class Restart(NamedTuple):
    pass


class ChainLost(NamedTuple):
    chain: int


class Landed(NamedTuple):
    txn: int


class Finalized(NamedTuple):
    txn: int


class Cut(NamedTuple):
    txn: int


class WaitElapsed(NamedTuple):
    attempt: int


# -- outputs --------------------------------------------------------------------

class Send(NamedTuple):
    kind: MsgKind
    dst: int
    attempt: int


class SetTimer(NamedTuple):
    delay: float
    token: Union[Timeout, WaitElapsed]


class Completed(NamedTuple):
    committed: bool


class Requeue(NamedTuple):
    txn: int


class Replicate(NamedTuple):
    phase: int


class Submit(NamedTuple):
    txn: int


class WindowAdd(NamedTuple):
    txn: int


class WindowEvict(NamedTuple):
    txn: int


@dataclass(frozen=True)
class ProtocolConfig:
    kind: ProtocolKind
    deadline: float = 1.0
    max_retries: int = 0
    literal_wait: bool = False

    @property
    def done_on_landing(self) -> bool:
        return self.kind is not ProtocolKind.SBP


# ---------------------------------------------------------------------------
# coordinator


class CoordPhase(Enum):
    INIT = "Init"
    PRECOMMIT_SENT = "PrecommitSent"
    COMMIT_SENT = "CommitSent"
    COMMITTED = "Committed"
    ABORTED = "Aborted"


@dataclass(frozen=True)
class CoordinatorState:
    txn: int
    chain: int
    participants: Tuple[int, ...]
    phase: CoordPhase = CoordPhase.INIT
    attempt: int = 0
    ready: FrozenSet[int] = frozenset()
    done: FrozenSet[int] = frozenset()
    retries: int = 0
    recycles: int = 0
    restart_pending: bool = False
    deadline_timer: Optional[float] = None
    phase_failures: Tuple[int, int] = (0, 0)
    epochs: Tuple[Tuple[int, int], ...] = ()

    @property
    def pending_replies(self) -> FrozenSet[int]:
        if self.phase is CoordPhase.PRECOMMIT_SENT:
            return frozenset(self.participants) - self.ready
        if self.phase is CoordPhase.COMMIT_SENT:
            return frozenset(self.participants) - self.done
        return frozenset()

    @property
    def terminal(self) -> bool:
        return self.phase in (CoordPhase.COMMITTED, CoordPhase.ABORTED)


def _check_epoch(epochs: Tuple[Tuple[int, int], ...], msg: Msg) -> Tuple[Tuple[int, int], ...]:
    seen = dict(epochs)
    last = seen.get(msg.src, 0)
    if msg.epoch < last:
        raise StaleEpoch(f"T{msg.txn}: {msg.kind.name} from chain {msg.src} epoch {msg.epoch} < {last}")
    if msg.epoch == last and msg.src in seen:
        return epochs
    seen[msg.src] = msg.epoch
    return tuple(sorted(seen.items()))


def _begin_attempt(state: CoordinatorState, cfg: ProtocolConfig, now: float,
                   targets: Iterable[int], **changes) -> Tuple[CoordinatorState, list]:
    state = replace(state, phase=CoordPhase.PRECOMMIT_SENT, deadline_timer=now + cfg.deadline, **changes)
    out: list = [Send(MsgKind.PRECOMMIT, c, state.attempt) for c in targets]
    out.append(SetTimer(cfg.deadline, Timeout(state.attempt)))
    return state, out


def _abort(state: CoordinatorState, skip: Iterable[int] = ()) -> Tuple[CoordinatorState, list]:
    skip = set(skip)
    state = replace(state, phase=CoordPhase.ABORTED, deadline_timer=None)
    out: list = [Send(MsgKind.ABORT, c, state.attempt) for c in state.participants if c not in skip]
    out.append(Completed(False))
    return state, out


def coordinator_step(state: CoordinatorState, event, cfg: ProtocolConfig,
                     now: float = 0.0) -> Tuple[CoordinatorState, list]:
    if isinstance(event, Msg):
        if event.txn != state.txn:
            raise UnknownTxn(f"message for T{event.txn} reached coordinator of T{state.txn}")
        epochs = _check_epoch(state.epochs, event)
        if epochs is not state.epochs:
            state = replace(state, epochs=epochs)
        return _coordinator_msg(state, event, cfg, now)

    if isinstance(event, Start):
        if state.phase is not CoordPhase.INIT:
            return state, []
        return _begin_attempt(state, cfg, now, state.participants)

    if isinstance(event, Timeout):
        if state.phase is not CoordPhase.PRECOMMIT_SENT or event.attempt != state.attempt:
            return state, []
        if state.retries < cfg.max_retries or state.recycles > 0:
            # a recycled transaction already has legs on chain; it may only retry
            missing = [c for c in state.participants if c not in state.ready]
            return _begin_attempt(state, cfg, now, missing,
                                  attempt=state.attempt + 1, retries=state.retries + 1)
        return _abort(state)

    if isinstance(event, Restart):
        if state.phase is not CoordPhase.COMMITTED:
            return state, []
        return _begin_attempt(state, cfg, now, state.participants,
                              attempt=state.attempt + 1, recycles=state.recycles + 1,
                              ready=frozenset(), done=frozenset(), restart_pending=False)

    if isinstance(event, ChainLost):
        if (state.phase is CoordPhase.PRECOMMIT_SENT and event.chain in state.participants
                and state.recycles == 0):
            # the lost chain still gets ABORT: delivery is persistent and it may hold a lock
            return _abort(state)
        return state, []

    raise ProtocolError(f"coordinator cannot handle {event!r}")


def _coordinator_msg(state: CoordinatorState, msg: Msg, cfg: ProtocolConfig,
                     now: float) -> Tuple[CoordinatorState, list]:
    kind = msg.kind
    if kind is MsgKind.READY:
        if (state.phase is not CoordPhase.PRECOMMIT_SENT or msg.src in state.ready
                or msg.src not in state.participants or msg.attempt > state.attempt):
            return state, []
        ready = state.ready | {msg.src}
        if len(ready) < len(state.participants):
            return replace(state, ready=ready), []
        state = replace(state, ready=ready, phase=CoordPhase.COMMIT_SENT, deadline_timer=None)
        return state, [Send(MsgKind.COMMIT, c, state.attempt) for c in state.participants]

    if kind is MsgKind.ABORT_VOTE:
        if state.phase is not CoordPhase.PRECOMMIT_SENT:
            return state, []
        return _abort(state, skip=[msg.src])

    if kind is MsgKind.DONE:
        if (state.phase is not CoordPhase.COMMIT_SENT or msg.attempt != state.attempt
                or msg.src in state.done):
            return state, []
        done = state.done | {msg.src}
        if len(done) < len(state.participants):
            return replace(state, done=done), []
        out: list = [Completed(True)]
        if state.restart_pending:
            out.append(Requeue(state.txn))
        return replace(state, done=done, phase=CoordPhase.COMMITTED, restart_pending=False), out

    if kind is MsgKind.RECYCLE:
        if cfg.kind is not ProtocolKind.RBP or msg.attempt < state.attempt:
            return state, []
        if state.phase is CoordPhase.COMMITTED:
            return state, [Requeue(state.txn)]
        if state.phase is CoordPhase.COMMIT_SENT:
            return replace(state, restart_pending=True), []
        return state, []

    return state, []


# ---------------------------------------------------------------------------
# participant


class PartPhase(Enum):
    IDLE = "Idle"
    READY = "Ready"
    APPLIED = "Applied"
    DONE_SENT = "DoneSent"
    FINISHED = "Finished"
    ABORTED = "Aborted"


@dataclass(frozen=True)
class ParticipantState:
    txn: int
    chain: int
    coordinator: int
    entity: EntityId
    amount: int
    delta: float = 0.0
    phase: PartPhase = PartPhase.IDLE
    lock_held: Optional[EntityId] = None
    attempt: int = -1
    precommit_seen: int = -1
    commit_seen: int = -1
    done_attempt: int = -1
    applied: bool = False
    landed: bool = False
    finalized: bool = False
    done_wait_until: Optional[float] = None
    window_entry: Optional[float] = None
    coord_epoch: int = 0


def _unlock(state: ParticipantState, ledger: Ledger) -> Tuple[ParticipantState, Ledger]:
    if state.lock_held is None:
        return state, ledger
    return replace(state, lock_held=None), ledger.unlock(state.lock_held, state.txn)


def _send_done(state: ParticipantState, ledger: Ledger, cfg: ProtocolConfig, now: float,
               out: list) -> Tuple[ParticipantState, Ledger]:
    out.append(Send(MsgKind.DONE, state.coordinator, state.attempt))
    state, ledger = _unlock(state, ledger)
    phase = PartPhase.FINISHED if state.finalized else PartPhase.DONE_SENT
    state = replace(state, phase=phase, done_attempt=state.attempt)
    if cfg.kind is ProtocolKind.RBP and state.landed and not state.finalized:
        state = replace(state, window_entry=now)
        out.append(WindowAdd(state.txn))
    return state, ledger


def participant_step(state: ParticipantState, event, ledger: Ledger, cfg: ProtocolConfig,
                     now: float = 0.0) -> Tuple[ParticipantState, Ledger, list]:
    out: list = []
    if isinstance(event, Msg):
        if event.txn != state.txn:
            raise UnknownTxn(f"message for T{event.txn} reached participant of T{state.txn}")
        if event.epoch < state.coord_epoch:
            raise StaleEpoch(f"T{state.txn}: {event.kind.name} epoch {event.epoch} < {state.coord_epoch}")
        if event.epoch > state.coord_epoch:
            state = replace(state, coord_epoch=event.epoch)
        state, ledger = _participant_msg(state, event, ledger, cfg, now, out)
        return state, ledger, out

    phase = state.phase
    if isinstance(event, Landed):
        state = replace(state, landed=True)
        if phase is PartPhase.APPLIED:
            if cfg.done_on_landing:
                state, ledger = _send_done(state, ledger, cfg, now, out)
            elif cfg.literal_wait:
                state = replace(state, done_wait_until=now + state.delta)
                out.append(SetTimer(state.delta, WaitElapsed(state.attempt)))
        elif cfg.kind is ProtocolKind.RBP and phase is PartPhase.DONE_SENT and state.window_entry is None:
            state = replace(state, window_entry=now)
            out.append(WindowAdd(state.txn))
        return state, ledger, out

    if isinstance(event, Finalized):
        state = replace(state, finalized=True)
        if phase is PartPhase.APPLIED and not cfg.done_on_landing and not cfg.literal_wait:
            state, ledger = _send_done(state, ledger, cfg, now, out)
        elif phase is PartPhase.DONE_SENT:
            state = replace(state, phase=PartPhase.FINISHED)
        if state.window_entry is not None:
            state = replace(state, window_entry=None)
            out.append(WindowEvict(state.txn))
        return state, ledger, out

    if isinstance(event, Cut):
        state = replace(state, landed=False)
        if cfg.kind is ProtocolKind.RBP and phase is PartPhase.DONE_SENT:
            out.append(Send(MsgKind.RECYCLE, state.coordinator, state.done_attempt))
            if state.window_entry is not None:
                state = replace(state, window_entry=None)
                out.append(WindowEvict(state.txn))
        return state, ledger, out

    if isinstance(event, WaitElapsed):
        if phase is PartPhase.APPLIED and event.attempt == state.attempt:
            state, ledger = _send_done(state, ledger, cfg, now, out)
        return state, ledger, out

    raise ProtocolError(f"participant cannot handle {event!r}")


def _participant_msg(state: ParticipantState, msg: Msg, ledger: Ledger, cfg: ProtocolConfig,
                     now: float, out: list) -> Tuple[ParticipantState, Ledger]:
    kind = msg.kind
    phase = state.phase
    coord = state.coordinator

    if kind is MsgKind.PRECOMMIT:
        if msg.attempt <= state.precommit_seen:
            return state, ledger
        state = replace(state, precommit_seen=msg.attempt, attempt=max(state.attempt, msg.attempt))
        if phase is PartPhase.IDLE:
            try:
                if ledger.balances[state.entity] + state.amount < 0:
                    raise InsufficientFunds(str(state.entity))
                ledger = ledger.lock(state.entity, state.txn)
            except (AlreadyLocked, InsufficientFunds):
                out.append(Send(MsgKind.ABORT_VOTE, coord, msg.attempt))
                return replace(state, phase=PartPhase.ABORTED), ledger
            out.append(Replicate(1))
            out.append(Send(MsgKind.READY, coord, msg.attempt))
            return replace(state, phase=PartPhase.READY, lock_held=state.entity), ledger
        if phase is PartPhase.ABORTED:
            out.append(Send(MsgKind.ABORT_VOTE, coord, msg.attempt))
        else:
            out.append(Send(MsgKind.READY, coord, msg.attempt))
        return state, ledger

    if kind is MsgKind.COMMIT:
        if msg.attempt <= state.commit_seen:
            return state, ledger
        state = replace(state, commit_seen=msg.attempt, attempt=max(state.attempt, msg.attempt))
        if phase is PartPhase.READY:
            ledger = ledger.apply_leg(state.entity, state.amount, state.txn)
            out.append(Replicate(2))
            out.append(Submit(state.txn))
            return replace(state, phase=PartPhase.APPLIED, applied=True), ledger
        if phase in (PartPhase.APPLIED, PartPhase.DONE_SENT, PartPhase.FINISHED):
            # re-execution of an applied leg: acknowledge, never re-apply
            ok = state.finalized or (state.landed and cfg.done_on_landing)
            if ok:
                out.append(Send(MsgKind.DONE, coord, state.attempt))
                return replace(state, done_attempt=state.attempt), ledger
            if not state.landed:
                out.append(Submit(state.txn))
            return replace(state, phase=PartPhase.APPLIED), ledger
        return state, ledger

    if kind is MsgKind.ABORT:
        if phase is PartPhase.READY:
            state, ledger = _unlock(state, ledger)
            out.append(Replicate(2))
            return replace(state, phase=PartPhase.ABORTED), ledger
        if phase is PartPhase.IDLE:
            return replace(state, phase=PartPhase.ABORTED), ledger
        return state, ledger

    return state, ledger


def sbp_coordinator_step(state, event, cfg: ProtocolConfig, now: float = 0.0):
    assert cfg.kind is ProtocolKind.SBP
    return coordinator_step(state, event, cfg, now)


def sbp_participant_step(state, event, ledger, cfg: ProtocolConfig, now: float = 0.0):
    assert cfg.kind is ProtocolKind.SBP
    return participant_step(state, event, ledger, cfg, now)


def rbp_participant_step(state, event, ledger, cfg: ProtocolConfig, now: float = 0.0):
    assert cfg.kind is ProtocolKind.RBP
    return participant_step(state, event, ledger, cfg, now)


def tpc_step(state, event, cfg: ProtocolConfig, now: float = 0.0, ledger: Optional[Ledger] = None):
    """Two-phase commit baseline: coordinator if `ledger` is None, else participant."""
    assert cfg.kind in (ProtocolKind.TPC, ProtocolKind.HUB)
    if ledger is None:
        return coordinator_step(state, event, cfg, now)
    return participant_step(state, event, ledger, cfg, now)


# ---------------------------------------------------------------------------
# hub admission


@dataclass(frozen=True)
class HubState:
    capacity: int
    active: FrozenSet[int] = frozenset()
    queue: Tuple[int, ...] = ()


class HubForward(NamedTuple):
    txn: int


class HubFinished(NamedTuple):
    txn: int


class HubStart(NamedTuple):
    txn: int


def hub_step(state: HubState, event) -> Tuple[HubState, list]:
    """Admission control at the hub: at most `capacity` transactions in flight."""
    if isinstance(event, HubForward):
        if event.txn in state.active or event.txn in state.queue:
            return state, []
        if len(state.active) < state.capacity:
            return replace(state, active=state.active | {event.txn}), [HubStart(event.txn)]
        return replace(state, queue=state.queue + (event.txn,)), []
    if isinstance(event, HubFinished):
        if event.txn not in state.active:
            return state, []
        active = state.active - {event.txn}
        out = []
        queue = state.queue
        while queue and len(active) < state.capacity:
            nxt, queue = queue[0], queue[1:]
            active = active | {nxt}
            out.append(HubStart(nxt))
        return replace(state, active=active, queue=queue), out
    raise ProtocolError(f"hub cannot handle {event!r}")


# ---------------------------------------------------------------------------
# sliding window and request pool (RBP)


class SlidingWindow:
    """Transactions applied on one chain within the last delta."""

    def __init__(self, chain: int):
        self.chain = chain
        self.entries: "OrderedDict[int, Tuple[float, Optional[int]]]" = OrderedDict()

    def add(self, uuid: int, applied_at: float, block_ref: Optional[int] = None) -> None:
        self.entries[uuid] = (applied_at, block_ref)

    def evict(self, uuid: int) -> bool:
        return self.entries.pop(uuid, None) is not None

    def expire(self, now: float, delta: float) -> List[int]:
        """Drop entries applied at or before now - delta; returns their uuids."""
        gone = [u for u, (t, _) in self.entries.items() if t <= now - delta]
        for u in gone:
            del self.entries[u]
        return gone

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, uuid: int) -> bool:
        return uuid in self.entries


@dataclass(frozen=True)
class RequestPool:
    requests: Dict[int, TransactionRequest] = field(default_factory=dict)
    queue: Tuple[int, ...] = ()
    recycle_counts: Dict[int, int] = field(default_factory=dict)

    def pop(self) -> Tuple[Optional[int], "RequestPool"]:
        if not self.queue:
            return None, self
        return self.queue[0], replace(self, queue=self.queue[1:])

    def entries(self) -> List[Tuple[TransactionRequest, int]]:
        return [(self.requests[u], self.recycle_counts.get(u, 0)) for u in self.queue]


def recycle(pool: RequestPool, cut_txns: Iterable[int]) -> RequestPool:
    """Return cut transactions to the pool, once each, bumping their recycle counters."""
    cut = sorted(set(cut_txns))
    if not cut:
        return pool
    queue = list(pool.queue)
    counts = dict(pool.recycle_counts)
    for u in cut:
        if u not in pool.requests:
            raise UnknownTxn(f"T{u} was never submitted to this pool")
        if u in queue:
            continue
        queue.append(u)
        counts[u] = counts.get(u, 0) + 1
    return replace(pool, queue=tuple(queue), recycle_counts=counts)
