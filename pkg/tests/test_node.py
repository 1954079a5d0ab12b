import itertools

import pytest

from xcommit.chain import NodeId, exclusive_txns, longest_branch
from xcommit.node import ChainNode, ChainParams, NoQualifiedNode


def node(**kw):
    kw.setdefault("delta", 10.0)
    kw.setdefault("sigma", 0.1)
    seed = kw.pop("seed", 0)
    return ChainNode(ChainParams(1, **kw), seed=seed)


def alive_except(*dead):
    return lambda n: n.ordinal not in dead


def test_params_reject_slow_heartbeat():
    with pytest.raises(ValueError):
        ChainParams(1, delta=1.0, sigma=0.2)


def test_no_forks_gives_a_single_chain():
    c = node(fork_prob=0.0)
    for k in range(50):
        c.submit(k)
        c.produce_block(0.1 * (k + 1))
    assert len(c.tree.tips) == 1
    assert len(c.main) == 51
    assert longest_branch(c.tree) == c.main


def shape(seed):
    c = ChainNode(ChainParams(1, delta=10.0, sigma=0.1, fork_prob=0.5), seed=seed)
    for k in range(100):
        c.submit(k)
        c.produce_block(0.1 * (k + 1))
    return sorted((b.index, b.parent or 0, b.txns) for b in c.tree.blocks.values())


def test_fork_shape_is_deterministic():
    assert shape(11) == shape(11)


def test_main_branch_is_always_the_longest():
    c = node(fork_prob=0.4, seed=5)
    for k in range(200):
        c.submit(k)
        c.produce_block(0.01 * (k + 1))
        assert c.main == longest_branch(c.tree)


def test_cut_set_matches_brute_force():
    # search seeds for a reorg that abandons blocks, then check the reported cut
    found = 0
    for seed in range(40):
        c = ChainNode(ChainParams(1, delta=10.0, sigma=0.1, fork_prob=0.5, max_fork_depth=2), seed=seed)
        for k in range(60):
            c.submit(k)
            before = list(c.main)
            res = c.produce_block(0.1 * (k + 1))
            if res.reorg:
                junction = next(i for i, b in enumerate(before) if i >= len(c.main) or c.main[i] is not b)
                old, new = before[junction:], c.main[junction:]
                brute = {u for b in old for u in b.txns} - {u for b in new for u in b.txns}
                assert set(res.cut) == brute == set(exclusive_txns(old, new))
                found += 1 if brute else 0
        # every cut leg is no longer recorded as landed
        for u in range(60):
            if c.is_landed(u):
                assert c.on_main(c.leg_block[u])
    assert found > 0


def test_forks_never_cut_finalized_blocks():
    c = node(fork_prob=0.5, delta=0.3, sigma=0.03, max_fork_depth=3, seed=2)
    final_seen = {}
    for k in range(300):
        c.submit(k)
        now = 0.1 * (k + 1)
        c.produce_block(now)
        fin = c.finalized_index(now)
        for i in range(fin + 1):
            final_seen.setdefault(i, c.main[i].block_id)
            assert c.main[i].block_id == final_seen[i]


def test_finality_floor_is_monotone():
    c = node(delta=10.0)
    c.produce_block(1.0)
    assert c.finalized_index(5.0) == -1
    c.finalize_through(1)
    assert c.finalized_index(5.0) == 1
    c.finalize_through(0)
    assert c.finalized_index(5.0) == 1
    assert c.finalized_index(12.0) == 1


def test_is_final_after_delta():
    c = node(delta=2.0, sigma=0.1)
    c.submit(4)
    c.produce_block(1.0)
    assert c.is_landed(4)
    assert not c.is_final(4, 2.9) and c.is_final(4, 3.0)
    assert c.final_at(4) == 3.0


def test_election_picks_smallest_live_ordinal():
    c = node()
    assert c.elect_proxy(alive_except(0)) == NodeId(1, 1)
    assert c.elect_proxy(alive_except(0, 1)) == NodeId(1, 2)
    assert c.proxy.epoch == 2


def test_single_node_chain_has_no_replacement():
    c = node(n_nodes=1)
    with pytest.raises(NoQualifiedNode):
        c.elect_proxy(alive_except(0))


def test_heartbeat_with_live_proxy():
    c = node()
    r = c.heartbeat_tick(0.1, alive_except())
    assert r.elected is None and r.proxy_alive and r.acks == 2
    r = c.heartbeat_tick(0.2, alive_except())
    assert c.proxy.last_heartbeat_ack[NodeId(1, 2)] == 0.2


@pytest.mark.parametrize("crash_at", [0.0, 0.01, 0.05, 0.0999, 0.1, 0.37])
def test_reelection_within_two_heartbeats(crash_at):
    sigma = 0.1
    c = node(sigma=sigma)
    for k in itertools.count(1):
        t = k * sigma
        dead = (0,) if t >= crash_at else ()
        r = c.heartbeat_tick(t, alive_except(*dead))
        if r.elected is not None:
            assert r.elected == NodeId(1, 1)
            assert t - crash_at <= 2 * sigma + 1e-12
            break


def test_whole_chain_down_raises_on_detection():
    c = node()
    c.heartbeat_tick(0.1, alive_except(0, 1, 2))
    with pytest.raises(NoQualifiedNode):
        c.heartbeat_tick(0.2, alive_except(0, 1, 2))


def test_producer_skips_dead_nodes():
    c = node()
    r = c.produce_block(0.1, alive_except(0, 1))
    assert r.block.producer == NodeId(1, 2)
    assert c.produce_block(0.2, alive_except(0, 1, 2)).block is None


def test_mempool_dedup():
    c = node()
    assert c.submit(3) and not c.submit(3)
    c.produce_block(0.1)
    assert not c.submit(3)
