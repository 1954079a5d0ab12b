"""Seeded synthetic transfer workload."""

from __future__ import annotations

import itertools
import random
from typing import List

from .chain import MASK64, EntityId, Leg, TransactionRequest, mix64
from .config import RunConfig


def txn_uuid(seed: int, k: int) -> int:
    return mix64(((seed & 0xFFFFFFFF) << 32) ^ k) & MASK64


def generate_workload(config: RunConfig) -> List[TransactionRequest]:
    """Transfers with exponential inter-arrival times, zero-sum legs and amounts in [1, 100].

    The coordinator chain is uniform over all chains; the remaining participant
    chains are sampled without replacement. The leg on the first chain of the
    (shuffled) chain list pays for all the others.
    """
    cfg = config.validate()
    rng = random.Random(f"{cfg.seed}:workload")
    n_acc = cfg.entities_per_chain
    if cfg.zipf_exponent > 0:
        weights = [1.0 / (k + 1) ** cfg.zipf_exponent for k in range(n_acc)]
        cum = list(itertools.accumulate(weights))
        accounts = range(n_acc)

        def pick() -> int:
            return rng.choices(accounts, cum_weights=cum)[0]
    else:
        def pick() -> int:
            return rng.randrange(n_acc)

    all_chains = list(range(1, cfg.n_chains + 1))
    out = []
    t = 0.0
    for k in range(cfg.n_transactions):
        t += rng.expovariate(cfg.arrival_rate)
        coord = rng.choice(all_chains)
        others = rng.sample([c for c in all_chains if c != coord], cfg.legs_per_txn - 1)
        chains = [coord] + others
        rng.shuffle(chains)
        credits = [rng.randint(1, 100) for _ in chains[1:]]
        deltas = [-sum(credits)] + credits
        legs = tuple(Leg(c, EntityId(c, pick()), d) for c, d in zip(chains, deltas))
        out.append(TransactionRequest(txn_uuid(cfg.seed, k), coord, legs, t))
    return out
