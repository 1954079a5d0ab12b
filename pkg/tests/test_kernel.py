import pytest

from xcommit.chain import NodeId
from xcommit.kernel import BudgetExhausted, EventKind, Kernel, LivelockDetected, SimParams

A, B = NodeId(1, 0), NodeId(2, 0)


def kernel(**kw):
    k = Kernel(SimParams(**kw))
    got = []
    k.register(B, lambda env: got.append((round(k.now, 9), env.msg_id)))
    k.register(A, lambda env: None)
    return k, got


def test_send_zero_jitter_delivers_after_tau():
    k, got = kernel(tau=0.05)
    k.send(k.envelope(A, B, 1, 7))
    k.run()
    assert got == [(0.05, 1)]


def test_same_time_sends_keep_sequence_order():
    k, got = kernel(tau=0.05)
    k.send(k.envelope(A, B, 1, 7))
    k.send(k.envelope(A, B, 2, 7))
    k.run()
    assert got == [(0.05, 1), (0.05, 2)]


def test_message_to_crashed_node_waits_for_recovery():
    # down during [40ms, 2s): the 50ms delivery is held until 2s
    k, got = kernel(tau=0.05, f=1.96, lambda_budget=1)
    k.inject_crash(B, 0.04)
    k.send(k.envelope(A, B, 1, 7))
    k.run()
    assert got == [(2.0, 1)]


def test_crash_interval():
    k, got = kernel(tau=0.05, f=3.0, lambda_budget=1)
    k.inject_crash(B, 1.0)
    probes = {}
    for t in (0.5, 1.0, 2.0, 3.999):
        k.schedule(t, EventKind.TIMER, lambda t=t: probes.__setitem__(t, k.is_up(B)))
    k.schedule(2.0, EventKind.TIMER, lambda: probes.__setitem__("until", k.down_until(B)))
    k.schedule(3.95, EventKind.TIMER, lambda: k.send(k.envelope(A, B, 1, 7)))
    k.schedule(4.5, EventKind.TIMER, lambda: probes.__setitem__(4.5, k.is_up(B)))
    k.run()
    assert probes == {0.5: True, 1.0: False, 2.0: False, 3.999: False, "until": 4.0, 4.5: True}
    assert got == [(4.0, 1)]


def test_zero_budget_refuses_crash():
    k, _ = kernel(lambda_budget=0)
    with pytest.raises(BudgetExhausted):
        k.inject_crash(B, 1.0)


def test_budget_counts_per_transaction():
    k, _ = kernel(lambda_budget=2)
    k.inject_crash(B, 1.0, victims=[9])
    k.inject_crash(B, 5.0, victims=[9])
    with pytest.raises(BudgetExhausted):
        k.inject_crash(B, 9.0, victims=[9])
    k.inject_crash(B, 9.0, victims=[10])
    assert k.failures == {9: 2, 10: 1}


def test_empty_run_is_immediately_quiescent():
    k, _ = kernel()
    trace = k.run()
    assert trace.n_events == 0 and trace.events == () and trace.end_time == 0.0


def run_pingpong(seed, jitter):
    k = Kernel(SimParams(tau=0.05, latency_jitter=jitter, seed=seed))
    k.register(B, lambda env: env.txn < 20 and k.send(k.envelope(B, A, 1, env.txn + 1)))
    k.register(A, lambda env: env.txn < 20 and k.send(k.envelope(A, B, 1, env.txn + 1)))
    k.send(k.envelope(A, B, 1, 0))
    return k.run()


def test_same_seed_same_trace():
    assert run_pingpong(3, 0.1).digest() == run_pingpong(3, 0.1).digest()


def test_seeds_differ_only_in_timestamps():
    a, b = run_pingpong(1, 0.1), run_pingpong(2, 0.1)
    assert a.digest() != b.digest()
    assert [e[1:] for e in a.events] == [e[1:] for e in b.events]


def test_jitter_stays_in_range():
    k = Kernel(SimParams(tau=0.05, latency_jitter=0.2, seed=4))
    lats = [k.sample_latency() for _ in range(2000)]
    lo, hi = k.params.tau_bounds
    assert lo <= min(lats) and max(lats) <= hi
    assert k.max_latency == max(lats)


def test_cannot_schedule_in_the_past():
    k, _ = kernel()
    k.schedule(1.0, EventKind.TIMER, lambda: k.schedule(0.5, EventKind.TIMER, lambda: None))
    with pytest.raises(Exception):
        k.run()


def test_livelock_cap():
    k = Kernel(SimParams(), event_cap=100)

    def spin():
        k.after(0.0, EventKind.TIMER, spin)
    k.after(0.0, EventKind.TIMER, spin)
    with pytest.raises(LivelockDetected):
        k.run()


def test_parked_messages_follow_a_redirect():
    k, got = kernel(tau=0.05, f=10.0, lambda_budget=1)
    other = []
    C = NodeId(2, 1)
    k.register(C, lambda env: other.append(round(k.now, 9)))
    k.inject_crash(B, 0.0)
    k.send(k.envelope(A, B, 1, 7))
    k.schedule(0.3, EventKind.TIMER, lambda: k.redirect_parked(B, C))
    k.run()
    assert other == [0.3] and got == []


def test_late_messages_to_a_replaced_node_are_forwarded():
    k, got = kernel(tau=0.05, f=10.0, lambda_budget=1)
    other = []
    C = NodeId(2, 1)
    k.register(C, lambda env: other.append(round(k.now, 9)))
    k.inject_crash(B, 0.0)
    k.schedule(0.1, EventKind.TIMER, lambda: k.redirect_parked(B, C))
    k.schedule(0.2, EventKind.TIMER, lambda: k.send(k.envelope(A, B, 1, 7)))
    k.run()
    assert other == [0.25] and got == []
