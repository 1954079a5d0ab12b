import pytest
from hypothesis import given, strategies as st

from xcommit.chain import EntityId, Leg, Ledger, TransactionRequest
from xcommit.config import ConfigInvalid, RunConfig
from xcommit.protocols import (ChainLost, Completed, CoordinatorState, CoordPhase, Cut, Finalized,
                               HubFinished, HubForward, HubStart, HubState, Landed, Msg, MsgKind,
                               ParticipantState, PartPhase, ProtocolConfig, ProtocolKind, Requeue,
                               RequestPool, Restart, Send, SetTimer, SlidingWindow, Start, StaleEpoch,
                               Submit, Timeout, WindowAdd, WindowEvict, coordinator_step,
                               participant_step, rbp_participant_step, recycle, sbp_coordinator_step,
                               sbp_participant_step, tpc_step)

T = 42
SBP = ProtocolConfig(ProtocolKind.SBP, deadline=1.0)
RBP = ProtocolConfig(ProtocolKind.RBP, deadline=1.0)
TPC = ProtocolConfig(ProtocolKind.TPC, deadline=1.0)


def sends(out, kind=None):
    return [o for o in out if isinstance(o, Send) and (kind is None or o.kind is kind)]


def msg(kind, src, dst=1, attempt=0, epoch=0):
    return Msg(kind, T, src, dst, attempt, epoch)


def coord(n=3, cfg=SBP):
    st, out = coordinator_step(CoordinatorState(T, 1, tuple(range(1, n + 1))), Start(), cfg)
    return st, out


def part(chain=2, amount=-10, delta=10.0):
    return ParticipantState(T, chain, 1, EntityId(chain, 0), amount, delta)


def led(chain=2, balance=100):
    return Ledger.uniform(chain, 1, balance)


# -- coordinator -------------------------------------------------------------------

def test_start_broadcasts_precommit_including_self():
    st, out = coord(3)
    assert st.phase is CoordPhase.PRECOMMIT_SENT
    assert sorted(s.dst for s in sends(out, MsgKind.PRECOMMIT)) == [1, 2, 3]
    assert any(isinstance(o, SetTimer) and o.token == Timeout(0) for o in out)


def test_all_ready_emits_three_commits():
    st, _ = coord(3)
    for c in (1, 2):
        st, out = sbp_coordinator_step(st, msg(MsgKind.READY, c), SBP)
        assert out == []
    st, out = sbp_coordinator_step(st, msg(MsgKind.READY, 3), SBP)
    assert st.phase is CoordPhase.COMMIT_SENT
    assert sorted(s.dst for s in sends(out, MsgKind.COMMIT)) == [1, 2, 3]


def test_abort_vote_aborts_globally():
    st, _ = coord(3)
    st, _ = coordinator_step(st, msg(MsgKind.READY, 1), SBP)
    st, out = coordinator_step(st, msg(MsgKind.ABORT_VOTE, 2), SBP)
    assert st.phase is CoordPhase.ABORTED
    assert Completed(False) in out
    # the voter released nothing it holds; everyone else is told
    assert sorted(s.dst for s in sends(out, MsgKind.ABORT)) == [1, 3]


def test_duplicate_ready_is_ignored():
    st, _ = coord(3)
    st, _ = coordinator_step(st, msg(MsgKind.READY, 2), SBP)
    again, out = coordinator_step(st, msg(MsgKind.READY, 2), SBP)
    assert again == st and out == []


def test_all_done_commits():
    st, _ = coord(2)
    for c in (1, 2):
        st, _ = coordinator_step(st, msg(MsgKind.READY, c), SBP)
    st, _ = coordinator_step(st, msg(MsgKind.DONE, 1), SBP)
    st, out = coordinator_step(st, msg(MsgKind.DONE, 2), SBP)
    assert st.phase is CoordPhase.COMMITTED and out == [Completed(True)]


def test_timeout_retries_then_aborts():
    cfg = ProtocolConfig(ProtocolKind.SBP, deadline=1.0, max_retries=1)
    st, _ = coord(2, cfg)
    st, _ = coordinator_step(st, msg(MsgKind.READY, 1), cfg)
    st, out = coordinator_step(st, Timeout(0), cfg)
    assert st.attempt == 1 and [s.dst for s in sends(out)] == [2]
    stale, out = coordinator_step(st, Timeout(0), cfg)
    assert stale == st and out == []
    st, out = coordinator_step(st, Timeout(1), cfg)
    assert st.phase is CoordPhase.ABORTED


def test_timeout_after_commit_sent_is_ignored():
    st, _ = coord(2)
    for c in (1, 2):
        st, _ = coordinator_step(st, msg(MsgKind.READY, c), SBP)
    after, out = coordinator_step(st, Timeout(0), SBP)
    assert after == st and out == []


def test_chain_lost_during_phase_one_aborts_everyone():
    st, _ = coord(3)
    st, out = coordinator_step(st, ChainLost(2), SBP)
    assert st.phase is CoordPhase.ABORTED
    assert sorted(s.dst for s in sends(out, MsgKind.ABORT)) == [1, 2, 3]


def test_stale_epoch_rejected():
    st, _ = coord(2)
    st, _ = coordinator_step(st, msg(MsgKind.READY, 2, epoch=1), SBP)
    with pytest.raises(StaleEpoch):
        coordinator_step(st, msg(MsgKind.READY, 2, epoch=0), SBP)


# -- participant -------------------------------------------------------------------

def test_precommit_locks_and_votes_ready():
    ps, lg, out = sbp_participant_step(part(), msg(MsgKind.PRECOMMIT, 1, 2), led(), SBP)
    assert ps.phase is PartPhase.READY
    assert lg.holder(EntityId(2, 0)) == T
    assert sends(out) == [Send(MsgKind.READY, 1, 0)]


def test_precommit_on_locked_entity_votes_abort():
    lg = led().lock(EntityId(2, 0), 7)
    ps, lg2, out = sbp_participant_step(part(), msg(MsgKind.PRECOMMIT, 1, 2), lg, SBP)
    assert ps.phase is PartPhase.ABORTED and lg2 is lg
    assert sends(out) == [Send(MsgKind.ABORT_VOTE, 1, 0)]


def test_precommit_with_insufficient_funds_votes_abort():
    ps, _, out = sbp_participant_step(part(amount=-500), msg(MsgKind.PRECOMMIT, 1, 2), led(), SBP)
    assert ps.phase is PartPhase.ABORTED and sends(out)[0].kind is MsgKind.ABORT_VOTE


def ready_then_commit(cfg, state=None):
    ps, lg, _ = participant_step(state or part(), msg(MsgKind.PRECOMMIT, 1, 2), led(), cfg)
    ps, lg, out = participant_step(ps, msg(MsgKind.COMMIT, 1, 2), lg, cfg)
    return ps, lg, out


def test_commit_applies_and_submits():
    ps, lg, out = ready_then_commit(SBP)
    assert ps.applied and lg.balances[EntityId(2, 0)] == 90
    assert Submit(T) in out and not sends(out)


def test_sbp_done_waits_for_finality():
    ps, lg, _ = ready_then_commit(SBP)
    ps, lg, out = participant_step(ps, Landed(T), lg, SBP, now=5.0)
    assert not sends(out)
    ps, lg, out = participant_step(ps, Finalized(T), lg, SBP, now=15.0)
    assert sends(out) == [Send(MsgKind.DONE, 1, 0)]
    assert ps.phase is PartPhase.FINISHED and lg.holder(EntityId(2, 0)) is None


def test_sbp_literal_wait_counts_from_inclusion():
    cfg = ProtocolConfig(ProtocolKind.SBP, literal_wait=True)
    ps, lg, _ = ready_then_commit(cfg)
    ps, lg, out = participant_step(ps, Landed(T), lg, cfg, now=5.0)
    timer = [o for o in out if isinstance(o, SetTimer)][0]
    assert timer.delay == 10.0 and ps.done_wait_until == 15.0


def test_rbp_done_right_after_landing():
    ps, lg, _ = ready_then_commit(RBP)
    ps, lg, out = rbp_participant_step(ps, Landed(T), lg, RBP, now=3.0)
    assert sends(out) == [Send(MsgKind.DONE, 1, 0)]
    assert WindowAdd(T) in out and ps.window_entry == 3.0


def test_rbp_finality_evicts_window_entry():
    ps, lg, _ = ready_then_commit(RBP)
    ps, lg, _ = participant_step(ps, Landed(T), lg, RBP, now=3.0)
    ps, lg, out = participant_step(ps, Finalized(T), lg, RBP, now=13.0)
    assert out == [WindowEvict(T)] and ps.phase is PartPhase.FINISHED


def test_rbp_cut_sends_recycle():
    ps, lg, _ = ready_then_commit(RBP)
    ps, lg, _ = participant_step(ps, Landed(T), lg, RBP, now=3.0)
    ps, lg, out = participant_step(ps, Cut(T), lg, RBP, now=3.5)
    assert Send(MsgKind.RECYCLE, 1, 0) in out and WindowEvict(T) in out


def test_sbp_cut_does_not_recycle():
    ps, lg, _ = ready_then_commit(SBP)
    ps, lg, _ = participant_step(ps, Landed(T), lg, SBP)
    ps, lg, out = participant_step(ps, Cut(T), lg, SBP)
    assert out == [] and not ps.landed


def test_commit_replay_never_reapplies():
    ps, lg, _ = ready_then_commit(RBP)
    ps, lg, _ = participant_step(ps, Landed(T), lg, RBP)
    ps2, lg2, out = participant_step(ps, msg(MsgKind.COMMIT, 1, 2, attempt=1), lg, RBP)
    assert lg2.balances == lg.balances
    assert sends(out) == [Send(MsgKind.DONE, 1, 1)]


def test_abort_releases_lock():
    ps, lg, _ = participant_step(part(), msg(MsgKind.PRECOMMIT, 1, 2), led(), SBP)
    ps, lg, _ = participant_step(ps, msg(MsgKind.ABORT, 1, 2), lg, SBP)
    assert ps.phase is PartPhase.ABORTED and not ps.applied and lg.holder(EntityId(2, 0)) is None


# -- recycle path at the coordinator ------------------------------------------------

def committed_rbp():
    st, _ = coord(2, RBP)
    for c in (1, 2):
        st, _ = coordinator_step(st, msg(MsgKind.READY, c), RBP)
    for c in (1, 2):
        st, _ = coordinator_step(st, msg(MsgKind.DONE, c), RBP)
    return st


def test_recycle_after_commit_requeues_then_restarts_same_uuid():
    st = committed_rbp()
    st, out = coordinator_step(st, msg(MsgKind.RECYCLE, 2), RBP)
    assert out == [Requeue(T)]
    st, out = coordinator_step(st, Restart(), RBP)
    assert st.txn == T and st.attempt == 1 and st.recycles == 1
    assert sorted(s.dst for s in sends(out, MsgKind.PRECOMMIT)) == [1, 2]


def test_recycle_ignored_outside_rbp():
    st, _ = coord(2, SBP)
    after, out = coordinator_step(st, msg(MsgKind.RECYCLE, 2), SBP)
    assert out == [] and after.phase is st.phase and after.attempt == st.attempt


# -- two-phase commit ----------------------------------------------------------------

def test_tpc_three_chains_commits_in_two_round_trips():
    chains = (1, 2, 3)
    st, out = tpc_step(CoordinatorState(T, 1, chains), Start(), TPC)
    parts = {c: ParticipantState(T, c, 1, EntityId(c, 0), (-20 if c == 1 else 10)) for c in chains}
    ledgers = {c: led(c) for c in chains}
    trips = 0
    inflight = sends(out)
    while inflight:
        trips += 1
        replies = []
        for s in inflight:
            ps, lg, pout = tpc_step(parts[s.dst], Msg(s.kind, T, 1, s.dst, s.attempt), TPC, ledger=ledgers[s.dst])
            if any(isinstance(o, Submit) for o in pout):
                ps, lg, more = tpc_step(ps, Landed(T), TPC, ledger=lg)
                pout += more
            parts[s.dst], ledgers[s.dst] = ps, lg
            replies += [Msg(o.kind, T, s.dst, 1, o.attempt) for o in sends(pout)]
        inflight = []
        for r in replies:
            st, cout = tpc_step(st, r, TPC)
            inflight += sends(cout)
    assert st.phase is CoordPhase.COMMITTED and trips == 2
    assert sum(l.total() for l in ledgers.values()) == 300


def test_tpc_with_failure_budget_is_invalid():
    with pytest.raises(ConfigInvalid):
        RunConfig(protocol=ProtocolKind.TPC, lambda_budget=1).validate()
    with pytest.raises(ConfigInvalid):
        RunConfig(protocol=ProtocolKind.TPC, fork_prob=0.1).validate()


# -- hub admission ---------------------------------------------------------------------

def test_hub_capacity_one_queues_second():
    h = HubState(1)
    h, out = hub_step_all(h, [HubForward(1), HubForward(2)])
    assert out == [HubStart(1)] and h.queue == (2,)
    h, out = hub_step_all(h, [HubFinished(1)])
    assert out == [HubStart(2)] and h.active == {2}


def hub_step_all(h, events):
    from xcommit.protocols import hub_step
    out = []
    for e in events:
        h, o = hub_step(h, e)
        out += o
    return h, out


@given(st.integers(1, 5), st.lists(st.integers(0, 30), max_size=60))
def test_hub_never_exceeds_capacity(cap, script):
    h = HubState(cap)
    started = set()
    for x in script:
        ev = HubForward(x) if x not in started else HubFinished(x)
        h, out = hub_step_all(h, [ev])
        started |= {o.txn for o in out}
        assert len(h.active) <= cap


# -- window and pool ---------------------------------------------------------------

def test_window_expiry():
    w = SlidingWindow(1)
    w.add(1, 0.0)
    w.add(2, 5.0)
    assert w.expire(10.0, 10.0) == [1]
    assert 2 in w and len(w) == 1


def pool():
    reqs = {u: TransactionRequest(u, 1, (Leg(1, EntityId(1, 0), -1), Leg(2, EntityId(2, 0), 1)))
            for u in (5, 6)}
    return RequestPool(reqs)


def test_recycle_nothing_keeps_pool():
    p = pool()
    assert recycle(p, []) is p


def test_recycle_once_counts_one():
    p = recycle(pool(), [6])
    assert [(r.uuid, n) for r, n in p.entries()] == [(6, 1)]


def test_simultaneous_cuts_enqueue_once():
    p = recycle(pool(), [6, 6])
    p = recycle(p, [6])
    assert p.queue == (6,) and p.recycle_counts[6] == 1
    u, p = p.pop()
    assert u == 6 and p.queue == ()
    assert recycle(p, [6]).recycle_counts[6] == 2
