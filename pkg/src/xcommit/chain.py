"""Blockchain domain types and pure ledger/fork-tree operations."""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, NewType, Optional, Tuple

ChainId = NewType("ChainId", int)

MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """splitmix64 finalizer; a bijection on 64-bit integers."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


class NodeId(NamedTuple):
    chain: int
    ordinal: int

    def __str__(self) -> str:
        return f"n{self.chain}.{self.ordinal}"


class EntityId(NamedTuple):
    chain: int
    account: int


class Leg(NamedTuple):
    chain: int
    entity: EntityId
    delta: int


@dataclass(frozen=True)
class TransactionRequest:
    uuid: int
    coordinator: int
    legs: Tuple[Leg, ...]
    submit_time: float = 0.0

    def __post_init__(self):
        chains = [leg.chain for leg in self.legs]
        if len(set(chains)) != len(chains):
            raise ValueError(f"T{self.uuid}: more than one leg on a chain")
        if len(chains) < 2:
            raise ValueError(f"T{self.uuid}: needs legs on at least 2 chains")
        if sum(leg.delta for leg in self.legs) != 0:
            raise ValueError(f"T{self.uuid}: legs do not sum to zero")
        for leg in self.legs:
            if leg.entity.chain != leg.chain:
                raise ValueError(f"T{self.uuid}: entity {leg.entity} not on chain {leg.chain}")
        if not 0 <= self.uuid <= MASK64:
            raise ValueError("uuid must fit in 64 bits")

    @property
    def chains(self) -> Tuple[int, ...]:
        return tuple(leg.chain for leg in self.legs)

    def leg_on(self, chain: int) -> Optional[Leg]:
        for leg in self.legs:
            if leg.chain == chain:
                return leg
        return None


# ---------------------------------------------------------------------------
# blocks and fork trees


def block_hash(chain: int, index: int, parent: Optional[int], txns: Iterable[int],
               producer: NodeId, created_at: float) -> int:
    payload = repr((chain, index, parent, tuple(txns), tuple(producer), float(created_at)))
    return int.from_bytes(hashlib.blake2b(payload.encode(), digest_size=8).digest(), "big")


@dataclass(frozen=True, eq=False)
class Block:
    chain: int
    index: int
    parent: Optional[int]
    txns: Tuple[int, ...]
    producer: NodeId
    created_at: float
    block_id: int

    @classmethod
    def make(cls, chain: int, parent: Optional["Block"], txns: Iterable[int],
             producer: NodeId, created_at: float) -> "Block":
        txns = tuple(txns)
        index = 0 if parent is None else parent.index + 1
        parent_id = None if parent is None else parent.block_id
        bid = block_hash(chain, index, parent_id, txns, producer, created_at)
        return cls(chain, index, parent_id, txns, producer, created_at, bid)

    def __repr__(self) -> str:
        return f"B{self.chain}^{self.index}#{self.block_id:016x}"


class ForkError(Exception):
    pass


@dataclass
class ForkTree:
    """All blocks ever produced for one chain, keyed by block id."""

    chain: int
    blocks: Dict[int, Block] = field(default_factory=dict)
    tips: set = field(default_factory=set)
    genesis: Optional[Block] = None
    tx_blocks: Dict[int, List[int]] = field(default_factory=dict, repr=False)

    @classmethod
    def with_genesis(cls, chain: int, created_at: float = 0.0) -> "ForkTree":
        tree = cls(chain)
        tree.add(Block.make(chain, None, (), NodeId(chain, 0), created_at))
        return tree

    def add(self, block: Block) -> Block:
        if block.chain != self.chain:
            raise ForkError(f"block {block!r} does not belong to chain {self.chain}")
        if block.block_id in self.blocks:
            raise ForkError(f"duplicate block id {block.block_id:016x}")
        if block.parent is None:
            if self.genesis is not None:
                raise ForkError("tree already has a genesis block")
            if block.index != 0:
                raise ForkError("genesis must have index 0")
            self.genesis = block
        else:
            parent = self.blocks.get(block.parent)
            if parent is None:
                raise ForkError(f"unknown parent for {block!r}")
            if block.index != parent.index + 1:
                raise ForkError(f"{block!r}: index must be parent index + 1")
            if block.created_at < parent.created_at:
                raise ForkError(f"{block!r} created before its parent")
            for t in block.txns:
                if self.branch_contains(parent, t):
                    raise ForkError(f"{block!r} repeats T{t} already on its branch")
            self.tips.discard(parent.block_id)
        self.blocks[block.block_id] = block
        self.tips.add(block.block_id)
        for t in block.txns:
            self.tx_blocks.setdefault(t, []).append(block.block_id)
        return block

    def parent_of(self, block: Block) -> Optional[Block]:
        return None if block.parent is None else self.blocks[block.parent]

    def path_to(self, block: Block) -> List[Block]:
        path = []
        cur: Optional[Block] = block
        while cur is not None:
            path.append(cur)
            cur = self.parent_of(cur)
        path.reverse()
        return path

    def is_ancestor(self, anc: Block, block: Block) -> bool:
        """True if `anc` lies on the path from genesis to `block` (inclusive)."""
        cur: Optional[Block] = block
        while cur is not None and cur.index > anc.index:
            cur = self.parent_of(cur)
        return cur is anc

    def branch_contains(self, tip: Block, uuid: int) -> bool:
        return any(self.is_ancestor(self.blocks[b], tip) for b in self.tx_blocks.get(uuid, ()))

    def __len__(self) -> int:
        return len(self.blocks)


def branch_key(block: Block) -> Tuple[int, int]:
    """Ordering key for fork choice: higher index wins, then smaller block id."""
    return (block.index, -block.block_id)


def longest_branch(tree: ForkTree) -> List[Block]:
    if not tree.blocks:
        raise ForkError("empty fork tree")
    best = max((tree.blocks[t] for t in tree.tips), key=branch_key)
    return tree.path_to(best)


def finalized_index(branch: List[Block], now: float, delta: float) -> Optional[int]:
    """Index of the last block on `branch` created at or before now - delta (None if none)."""
    cutoff = now - delta
    pos = bisect.bisect_right([b.created_at for b in branch], cutoff)
    return branch[pos - 1].index if pos else None


def finalized_prefix(tree: ForkTree, now: float, delta: float) -> Optional[int]:
    """Largest index h such that every main-branch block up to h is older than delta.

    Returns None when nothing (not even genesis) is final yet.
    """
    branch = longest_branch(tree)
    h = None
    for b in branch:
        if b.created_at <= now - delta:
            h = b.index
        else:
            break
    return h


def exclusive_txns(cut: Iterable[Block], main: Iterable[Block]) -> List[int]:
    """Transactions on the abandoned blocks that the new main branch does not carry."""
    kept = set()
    for b in main:
        kept.update(b.txns)
    out, seen = [], set()
    for b in cut:
        for t in b.txns:
            if t not in kept and t not in seen:
                seen.add(t)
                out.append(t)
    return out


# ---------------------------------------------------------------------------
# ledger


class LedgerError(Exception):
    pass


class UnknownEntity(LedgerError):
    pass


class InsufficientFunds(LedgerError):
    pass


class LockHeldByOther(LedgerError):
    pass


class AlreadyLocked(LedgerError):
    pass


class NotLockHolder(LedgerError):
    pass


@dataclass(frozen=True)
class Ledger:
    """Balances and entity locks of one chain. Operations return a new ledger."""

    chain: int
    balances: Mapping[EntityId, int]
    locks: Mapping[EntityId, int] = field(default_factory=dict)

    @classmethod
    def uniform(cls, chain: int, n_entities: int, balance: int) -> "Ledger":
        return cls(chain, {EntityId(chain, a): balance for a in range(n_entities)}, {})

    def _check(self, entity: EntityId) -> None:
        if entity not in self.balances:
            raise UnknownEntity(f"{entity} not on chain {self.chain}")

    def holder(self, entity: EntityId) -> Optional[int]:
        return self.locks.get(entity)

    def apply_leg(self, entity: EntityId, delta: int, holder: int) -> "Ledger":
        self._check(entity)
        owner = self.locks.get(entity)
        if owner is not None and owner != holder:
            raise LockHeldByOther(f"{entity} locked by T{owner}, not T{holder}")
        new = self.balances[entity] + delta
        if new < 0:
            raise InsufficientFunds(f"{entity}: balance {self.balances[entity]} cannot cover {delta}")
        balances = dict(self.balances)
        balances[entity] = new
        return Ledger(self.chain, balances, self.locks)

    def lock(self, entity: EntityId, uuid: int) -> "Ledger":
        self._check(entity)
        owner = self.locks.get(entity)
        if owner is not None:
            raise AlreadyLocked(f"{entity} already locked by T{owner}")
        locks = dict(self.locks)
        locks[entity] = uuid
        return Ledger(self.chain, self.balances, locks)

    def unlock(self, entity: EntityId, uuid: int) -> "Ledger":
        self._check(entity)
        owner = self.locks.get(entity)
        if owner is None:
            return self
        if owner != uuid:
            raise NotLockHolder(f"{entity} locked by T{owner}, unlock attempted by T{uuid}")
        locks = dict(self.locks)
        del locks[entity]
        return Ledger(self.chain, self.balances, locks)

    def total(self) -> int:
        return sum(self.balances.values())

    def key(self) -> tuple:
        return (self.chain, tuple(sorted(self.balances.items())), tuple(sorted(self.locks.items())))


def apply_leg(ledger: Ledger, leg: Tuple[EntityId, int], holder: int) -> Ledger:
    entity, delta = leg
    return ledger.apply_leg(entity, delta, holder)


def lock(ledger: Ledger, entity: EntityId, uuid: int) -> Ledger:
    return ledger.lock(entity, uuid)


def unlock(ledger: Ledger, entity: EntityId, uuid: int) -> Ledger:
    return ledger.unlock(entity, uuid)
