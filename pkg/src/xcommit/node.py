"""Per-chain simulation: block production with forks, finality, proxy failover."""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

from .chain import Block, ForkTree, NodeId, branch_key, exclusive_txns


class NoQualifiedNode(Exception):
    pass


@dataclass(frozen=True)
class ChainParams:
    chain: int
    n_nodes: int = 3
    delta: float = 10.0
    sigma: float = 1.0
    block_interval: float = 0.1
    fork_prob: float = 0.0
    max_fork_depth: int = 2

    def __post_init__(self):
        if self.chain < 1:
            raise ValueError("chain index must be positive")
        if self.n_nodes < 1:
            raise ValueError("a chain needs at least one node")
        if not 0 <= self.fork_prob < 1:
            raise ValueError("fork_prob must lie in [0, 1)")
        if self.max_fork_depth < 1:
            raise ValueError("max_fork_depth must be positive")
        if self.block_interval <= 0 or self.delta < 0:
            raise ValueError("block_interval must be positive and delta non-negative")
        if self.sigma <= 0 or self.sigma > self.delta / 10:
            raise ValueError(f"chain {self.chain}: sigma must satisfy 0 < sigma <= delta/10")

    @property
    def nodes(self) -> Tuple[NodeId, ...]:
        return tuple(NodeId(self.chain, k) for k in range(self.n_nodes))


@dataclass
class ProxyState:
    current_proxy: NodeId
    epoch: int = 0
    last_heartbeat_ack: Dict[NodeId, float] = field(default_factory=dict)


class BlockResult(NamedTuple):
    block: Optional[Block]
    landed: List[int]
    cut: List[int]
    reorg: bool


class HeartbeatResult(NamedTuple):
    elected: Optional[NodeId]
    probes: int
    acks: int
    proxy_alive: bool


class ChainNode:
    """One blockchain: its fork tree, main branch, mempool and proxy."""

    def __init__(self, params: ChainParams, seed: int = 0, genesis_time: float = 0.0):
        self.params = params
        self.chain = params.chain
        self.nodes = params.nodes
        self.tree = ForkTree.with_genesis(self.chain, genesis_time)
        self.main: List[Block] = [self.tree.genesis]
        self._times: List[float] = [genesis_time]
        self.leg_block: Dict[int, Block] = {}
        self.mempool: Dict[int, None] = {}
        self.proxy = ProxyState(self.nodes[0])
        self.rng = random.Random(f"{seed}:fork:{self.chain}")
        self._side_tip: Optional[Block] = None
        self._side_fork = -1
        self._rr = 0
        self._last_probe_acked = True
        self._final_floor = 0
        self.reorgs = 0
        self.cut_total = 0

    # -- queries -------------------------------------------------------------

    @property
    def tip(self) -> Block:
        return self.main[-1]

    def on_main(self, block: Block) -> bool:
        return block.index < len(self.main) and self.main[block.index] is block

    def finalized_index(self, now: float) -> int:
        """Highest finalized main-branch index, or -1 when nothing is final."""
        pos = bisect.bisect_right(self._times, now - self.params.delta)
        return max(pos - 1, self._final_floor if self._final_floor else -1)

    def finalize_through(self, index: int) -> None:
        """Record that the host treated main-branch blocks up to `index` as final."""
        if index > self._final_floor:
            self._final_floor = index

    def is_landed(self, uuid: int) -> bool:
        return uuid in self.leg_block

    def is_final(self, uuid: int, now: float) -> bool:
        b = self.leg_block.get(uuid)
        return b is not None and b.created_at <= now - self.params.delta

    def final_at(self, uuid: int) -> Optional[float]:
        b = self.leg_block.get(uuid)
        return None if b is None else b.created_at + self.params.delta

    # -- mempool -------------------------------------------------------------

    def submit(self, uuid: int) -> bool:
        if uuid in self.leg_block or uuid in self.mempool:
            return False
        self.mempool[uuid] = None
        return True

    def withdraw(self, uuid: int) -> None:
        self.mempool.pop(uuid, None)

    # -- block production ----------------------------------------------------

    def _fork_target(self, fin: int) -> Optional[Block]:
        tip = self.tip
        depth = self.params.max_fork_depth
        side = self._side_tip
        if (side is not None and side.block_id in self.tree.tips and not self.on_main(side)
                and self._side_fork >= fin and tip.index - self._side_fork <= depth):
            return side
        if tip.index == 0 or tip.index <= fin:
            return None
        self._side_fork = tip.index - 1
        self._side_tip = None
        return self.main[tip.index - 1]

    def _producer(self, alive: Callable[[NodeId], bool]) -> Optional[NodeId]:
        n = len(self.nodes)
        for k in range(n):
            node = self.nodes[(self._rr + k) % n]
            if alive(node):
                self._rr = (self._rr + k + 1) % n
                return node
        return None

    def produce_block(self, now: float, alive: Callable[[NodeId], bool] = lambda n: True) -> BlockResult:
        producer = self._producer(alive)
        if producer is None:
            return BlockResult(None, [], [], False)
        tip = self.tip
        parent = tip
        if self.params.fork_prob > 0 and self.rng.random() < self.params.fork_prob:
            target = self._fork_target(self.finalized_index(now))
            if target is not None:
                parent = target
        if parent is tip:
            txns = list(self.mempool)
        else:
            txns = [u for u in self.mempool if not self.tree.branch_contains(parent, u)]
        block = self.tree.add(Block.make(self.chain, parent, txns, producer, now))
        if parent is tip:
            self.main.append(block)
            self._times.append(now)
            for u in txns:
                self.leg_block[u] = block
                del self.mempool[u]
            return BlockResult(block, txns, [], False)
        self._side_tip = block
        if branch_key(block) > branch_key(tip):
            landed, cut = self._switch_to(block)
            return BlockResult(block, landed, cut, True)
        return BlockResult(block, [], [], False)

    def _switch_to(self, new_tip: Block) -> Tuple[List[int], List[int]]:
        seg = []
        cur = new_tip
        while not self.on_main(cur):
            seg.append(cur)
            cur = self.tree.parent_of(cur)
        seg.reverse()
        junction = cur.index
        old = self.main[junction + 1:]
        self.on_fork_resolved_cleanup(old)
        self.main = self.main[:junction + 1] + seg
        self._times = self._times[:junction + 1] + [b.created_at for b in seg]
        landed = []
        for b in seg:
            for u in b.txns:
                self.leg_block[u] = b
                if u in self.mempool:
                    del self.mempool[u]
                landed.append(u)
        cut = self.on_fork_resolved(old, seg)
        self._side_tip = old[-1] if old else None
        self._side_fork = junction
        self.reorgs += 1
        self.cut_total += len(cut)
        return landed, cut

    def on_fork_resolved_cleanup(self, old: List[Block]) -> None:
        for b in old:
            for u in b.txns:
                if self.leg_block.get(u) is b:
                    del self.leg_block[u]

    def on_fork_resolved(self, cut_branch: List[Block], new_main: List[Block]) -> List[int]:
        """UUIDs carried by the abandoned blocks but absent from the new main segment."""
        return exclusive_txns(cut_branch, new_main)

    # -- proxy failover ------------------------------------------------------

    def elect_proxy(self, alive: Callable[[NodeId], bool]) -> NodeId:
        for node in self.nodes:
            if alive(node):
                self.proxy.current_proxy = node
                self.proxy.epoch += 1
                return node
        raise NoQualifiedNode(f"chain {self.chain}: every node is down")

    def heartbeat_tick(self, now: float, alive: Callable[[NodeId], bool]) -> HeartbeatResult:
        """Evaluate the previous probe, re-elect on a miss, then probe again.

        Raises NoQualifiedNode when a miss is detected and no node is alive.
        """
        elected = None
        if not self._last_probe_acked:
            elected = self.elect_proxy(alive)
        proxy = self.proxy.current_proxy
        ok = alive(proxy)
        self._last_probe_acked = ok
        others = [n for n in self.nodes if n != proxy and alive(n)]
        if ok:
            for n in others:
                self.proxy.last_heartbeat_ack[n] = now
        return HeartbeatResult(elected, len(others), len(others) if ok else 0, ok)
